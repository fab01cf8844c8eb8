#!/usr/bin/env python3
"""
Test suite for residual quantization and quantizer dropout.
"""

import unittest
from collections import Counter

import numpy as np

from core import Codebook, ConfigError, DegenerateInputError, FeatureGrid, Rng
from leaf_quantizers import LeafKind, leaf_quantize_grid
from residual import ResidualConfig, draw_active_steps, rq_decode, rq_encode, rq_sum


def zero_augmented(rng, size, dim, scale=1.0):
    entries = rng.normal(scale=scale, size=(size - 1, dim))
    return Codebook(np.vstack([entries, np.zeros((1, dim))]))


class TestResidualEncode(unittest.TestCase):
    """Test cases for rq_encode / rq_decode."""

    def setUp(self):
        self.rng = np.random.default_rng(17)
        self.cb = zero_augmented(self.rng, 32, 4)

    def test_single_step_equals_leaf(self):
        g = FeatureGrid(self.rng.normal(size=(4, 4, 4)))
        trace = rq_encode(g, ResidualConfig(1, LeafKind.VQ, self.cb))
        q, codes, _ = leaf_quantize_grid(g, LeafKind.VQ, self.cb)
        self.assertTrue(rq_sum(trace).same_bits(q))
        self.assertEqual(trace.codes[0], codes)

    def test_refinement_is_monotone(self):
        """Per-step error never increases with a zero-augmented codebook."""
        cfg = ResidualConfig(8, LeafKind.VQ, self.cb)
        violations = 0
        for _ in range(1000):
            g = FeatureGrid(self.rng.normal(size=(2, 2, 4)))
            norms = rq_encode(g, cfg).residual_norms
            violations += sum(b > a for a, b in zip(norms, norms[1:]))
        self.assertEqual(violations, 0)

    def test_residual_identity(self):
        cfg = ResidualConfig(5, LeafKind.VQ, self.cb)
        for _ in range(50):
            g = FeatureGrid(self.rng.normal(size=(3, 3, 4)))
            trace = rq_encode(g, cfg)
            gap = g.data - rq_sum(trace).data - trace.final_residual.data
            self.assertLessEqual(float(np.max(np.abs(gap))), 1e-9)

    def test_decode_is_bitwise_equal(self):
        g = FeatureGrid(self.rng.normal(size=(3, 5, 4)))
        for kind, cb in ((LeafKind.VQ, self.cb), (LeafKind.LFQ, None), (LeafKind.BSQ, None)):
            cfg = ResidualConfig(3, kind, cb)
            trace = rq_encode(g, cfg)
            self.assertTrue(rq_decode(trace.codes, cfg, dim=4).same_bits(rq_sum(trace)))

    def test_decode_prefix_uses_only_n_steps(self):
        g = FeatureGrid(self.rng.normal(size=(2, 2, 4)))
        cfg = ResidualConfig(4, LeafKind.VQ, self.cb)
        trace = rq_encode(g, cfg)
        short = rq_encode(g, cfg, active_steps=2)
        self.assertTrue(rq_decode(trace.codes[:2], cfg).same_bits(rq_sum(short)))

    def test_worked_example(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        trace = rq_encode(FeatureGrid(np.array([[[1.4, 0.6]]])), ResidualConfig(2, LeafKind.VQ, cb))
        self.assertEqual([int(c.codes[0, 0]) for c in trace.codes], [1, 2])
        np.testing.assert_allclose(trace.inputs[1].data[0, 0], [0.4, 0.6], atol=1e-12)
        np.testing.assert_array_equal(rq_sum(trace).data[0, 0], [1.0, 1.0])
        np.testing.assert_allclose(trace.final_residual.data[0, 0], [0.4, -0.4], atol=1e-12)

    def test_bsq_exact_codeword_leaves_zero_residual(self):
        g = FeatureGrid(np.full((1, 1, 4), 0.5))
        cfg = ResidualConfig(2, LeafKind.BSQ, None)
        trace = rq_encode(g, cfg)
        self.assertEqual([int(c.codes[0, 0]) for c in trace.codes], [15, 15])
        self.assertEqual(float(np.abs(trace.inputs[1].data).max()), 0.0)
        np.testing.assert_array_equal(rq_sum(trace).data[0, 0], [1.0] * 4)
        self.assertTrue(rq_decode(trace.codes, cfg, dim=4).same_bits(rq_sum(trace)))
        with self.assertRaises(DegenerateInputError):
            rq_encode(FeatureGrid.zeros(1, 1, 4), cfg)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            ResidualConfig(0, LeafKind.VQ, self.cb)
        with self.assertRaises(ConfigError):
            ResidualConfig(2, LeafKind.LFQ, self.cb)
        with self.assertRaises(ConfigError):
            ResidualConfig(2, LeafKind.VQ, None)
        with self.assertRaises(ConfigError):
            ResidualConfig(10, LeafKind.VQ, self.cb, dropout_start=11)
        self.assertEqual(ResidualConfig(2, LeafKind.VQ, self.cb).dropout_start, 2)


class TestQuantizerDropout(unittest.TestCase):
    """Test cases for the dropout law."""

    def setUp(self):
        self.cb = Codebook(np.eye(4))

    def test_uniform_truncation(self):
        cfg = ResidualConfig(10, LeafKind.VQ, self.cb, dropout_ratio=1.0, dropout_start=3)
        rng = Rng(42)
        counts = Counter(draw_active_steps(cfg, training=True, rng=rng) for _ in range(10_000))
        self.assertEqual(set(counts), set(range(3, 11)))
        for n in range(3, 11):
            self.assertAlmostEqual(counts[n] / 10_000, 0.125, delta=0.05)

    def test_zero_ratio_keeps_all_steps(self):
        cfg = ResidualConfig(10, LeafKind.VQ, self.cb, dropout_ratio=0.0, dropout_start=3)
        rng = Rng(1)
        self.assertTrue(all(draw_active_steps(cfg, True, rng) == 10 for _ in range(1000)))

    def test_inference_ignores_seed(self):
        g = FeatureGrid(np.random.default_rng(0).normal(size=(2, 2, 4)))
        cfg = ResidualConfig(6, LeafKind.VQ, self.cb, dropout_ratio=1.0)
        a = rq_encode(g, cfg, training=False, rng=Rng(1))
        b = rq_encode(g, cfg, training=False, rng=Rng(999))
        self.assertEqual(a.active_steps, 6)
        self.assertTrue(rq_sum(a).same_bits(rq_sum(b)))

    def test_training_truncates_trace(self):
        g = FeatureGrid(np.random.default_rng(0).normal(size=(2, 2, 4)))
        cfg = ResidualConfig(6, LeafKind.VQ, self.cb, dropout_ratio=1.0, dropout_start=1)
        lengths = {rq_encode(g, cfg, training=True, rng=Rng(s)).active_steps for s in range(50)}
        self.assertTrue(lengths <= set(range(1, 7)))
        self.assertGreater(len(lengths), 1)

    def test_training_needs_rng(self):
        cfg = ResidualConfig(4, LeafKind.VQ, self.cb, dropout_ratio=0.5)
        with self.assertRaises(ConfigError):
            draw_active_steps(cfg, training=True)


if __name__ == '__main__':
    unittest.main(verbosity=2)
