#!/usr/bin/env python3
"""
Test suite for hierarchical quantizer composition and the variant grammar.
"""

import itertools
import unittest

import numpy as np

from core import CodeGrid, Codebook, ConfigError, FeatureGrid, Rng, ShapeMismatchError, VariantSyntaxError
from hierarchy import (
    HierarchySpec,
    collect_step_inputs,
    format_variant,
    hier_decode,
    hier_encode,
    parse_variant,
    pyramid_samples,
)
from leaf_quantizers import LeafKind, leaf_quantize_grid
from multiscale import ScaleSchedule


class TestVariantGrammar(unittest.TestCase):
    """Test cases for parse_variant / format_variant."""

    def test_defaults(self):
        spec = parse_variant("XQ-V")
        self.assertEqual(spec, HierarchySpec(False, LeafKind.VQ, 1, 1))

    def test_full_variants(self):
        self.assertEqual(parse_variant("XQ-MS-V-R10-P2"), HierarchySpec(True, LeafKind.VQ, 10, 2))
        self.assertEqual(parse_variant("XQ-MS-B-R10-P2"), HierarchySpec(True, LeafKind.BSQ, 10, 2))
        self.assertEqual(parse_variant("XQ-L-P4"), HierarchySpec(False, LeafKind.LFQ, 1, 4))

    def test_canonical_names(self):
        self.assertEqual(format_variant(HierarchySpec()), "XQ-V")
        self.assertEqual(format_variant(HierarchySpec(True, LeafKind.LFQ, 4, 1)), "XQ-MS-L-R4")
        self.assertEqual(format_variant(parse_variant("XQ-V-R1-P1")), "XQ-V")

    def test_round_trip_on_random_specs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            spec = HierarchySpec(
                multiscale=bool(rng.integers(0, 2)),
                leaf=list(LeafKind)[int(rng.integers(0, 3))],
                residual_steps=int(rng.integers(1, 256)),
                product_branches=int(rng.integers(1, 256)),
            )
            name = format_variant(spec)
            self.assertEqual(parse_variant(name), spec)
            self.assertEqual(format_variant(parse_variant(name)), name)

    def test_error_positions(self):
        cases = {
            "YQ-V": 0,
            "XQ-Q": 3,
            "XQ": 2,
            "XQ-MS": 5,
            "XQ-V-R0": 6,
            "XQ-V-Rx": 6,
            "XQ-V-R3-X": 8,
            "XQ-V-P2-R3": 8,
            "XQ--V": 3,
            "xq-v": 0,
        }
        for name, position in cases.items():
            with self.subTest(name=name):
                with self.assertRaises(VariantSyntaxError) as ctx:
                    parse_variant(name)
                self.assertEqual(ctx.exception.position, position)


class TestHierarchyEncode(unittest.TestCase):
    """Test cases for hier_encode / hier_decode."""

    def setUp(self):
        self.rng = np.random.default_rng(123)

    def _books(self, branches, size, dim, zero=False):
        books = []
        for _ in range(branches):
            entries = self.rng.normal(size=(size, dim))
            if zero:
                entries[-1] = 0.0
            books.append(Codebook(entries))
        return books

    def test_degenerate_collapse_to_vq(self):
        cb = self._books(1, 16, 5)
        for _ in range(20):
            g = FeatureGrid(self.rng.normal(size=(4, 3, 5)))
            outcome = hier_encode(g, parse_variant("XQ-V"), cb)
            q, codes, _ = leaf_quantize_grid(g, LeafKind.VQ, cb[0])
            self.assertTrue(outcome.quantized.same_bits(q))
            self.assertEqual(outcome.codes[0][0], codes)

    def test_residual_steps_refine(self):
        books = self._books(1, 32, 4, zero=True)
        spec = parse_variant("XQ-V-R3")
        for _ in range(50):
            errors = hier_encode(FeatureGrid(self.rng.normal(size=(3, 3, 4))), spec, books).step_errors
            self.assertEqual(len(errors), 3)
            for a, b in zip(errors, errors[1:]):
                self.assertLessEqual(b, a + 1e-12)

    def test_product_matches_cartesian_codebook(self):
        books = self._books(2, 4, 2)
        product = Codebook(np.array([np.concatenate(pair) for pair in
                                     itertools.product(books[0].entries, books[1].entries)]))
        g = FeatureGrid(self.rng.normal(size=(6, 6, 4)))
        outcome = hier_encode(g, parse_variant("XQ-V-P2"), books)
        q, _, _ = leaf_quantize_grid(g, LeafKind.VQ, product)
        self.assertTrue(outcome.quantized.same_bits(q))

    def test_round_trip_all_combinations(self):
        for ms, leaf, steps, branches in itertools.product(
                (False, True), LeafKind, (1, 3), (1, 2)):
            spec = HierarchySpec(ms, leaf, steps, branches)
            with self.subTest(variant=spec.name):
                g = FeatureGrid(self.rng.normal(size=(4, 4, 4)))
                books = None if leaf.is_binary else self._books(branches, 8, 4 // branches)
                outcome = hier_encode(g, spec, books)
                decoded = hier_decode(outcome.codes, spec, books, schedule=outcome.schedule, dim=4)
                self.assertTrue(decoded.same_bits(outcome.quantized))
                again = hier_decode(outcome.codes, spec, books, schedule=outcome.schedule, dim=4)
                self.assertTrue(again.same_bits(decoded))

    def test_zero_codes_decode_to_zero(self):
        cb = Codebook(np.vstack([np.zeros((1, 3)), np.ones((3, 3))]))
        codes = [[CodeGrid(np.zeros((2, 2), dtype=np.uint32))]]
        out = hier_decode(codes, parse_variant("XQ-V"), [cb])
        self.assertTrue(np.all(out.data == 0.0))

    def test_bsq_input_on_a_codeword(self):
        spec = parse_variant("XQ-B-R2")
        outcome = hier_encode(FeatureGrid(np.full((1, 1, 4), 0.5)), spec)
        self.assertEqual([int(c.codes[0, 0]) for c in outcome.codes[0]], [15, 15])
        self.assertEqual(outcome.step_errors[0], 0.0)
        np.testing.assert_array_equal(outcome.quantized.data[0, 0], [1.0] * 4)
        self.assertTrue(hier_decode(outcome.codes, spec, dim=4).same_bits(outcome.quantized))

    def test_single_code_broadcasts(self):
        cb = Codebook(self.rng.normal(size=(4, 3)))
        codes = [[CodeGrid(np.full((3, 2), 2, dtype=np.uint32))]]
        out = hier_decode(codes, parse_variant("XQ-V"), [cb])
        np.testing.assert_array_equal(out.data, np.broadcast_to(cb.entries[2], (3, 2, 3)))

    def test_bit_accounting(self):
        g = FeatureGrid(self.rng.normal(size=(2, 2, 4)))
        outcome = hier_encode(g, parse_variant("XQ-V-R2"), self._books(1, 16, 4))
        self.assertEqual(outcome.total_bits, 2 * 4 * 4)
        self.assertEqual(outcome.tokens, 8)
        books = [Codebook(self.rng.normal(size=(16, 2))), Codebook(self.rng.normal(size=(8, 2)))]
        outcome = hier_encode(g, parse_variant("XQ-V-R2-P2"), books)
        self.assertEqual(outcome.total_bits, 2 * 4 * 4 + 2 * 4 * 3)
        spec = parse_variant("XQ-MS-L-R2-P2").with_runtime(schedule=ScaleSchedule((1, 2)))
        outcome = hier_encode(FeatureGrid(self.rng.normal(size=(2, 2, 6))), spec)
        self.assertEqual(outcome.total_bits, 2 * (1 + 4) * 3)
        self.assertEqual(outcome.tokens, 2 * 5)

    def test_shared_dropout_draw(self):
        spec = parse_variant("XQ-MS-V-R4-P2").with_runtime(dropout_ratio=1.0, dropout_start=1)
        books = self._books(2, 8, 2)
        g = FeatureGrid(self.rng.normal(size=(4, 4, 4)))
        seen = set()
        for seed in range(30):
            outcome = hier_encode(g, spec, books, training=True, rng=Rng(seed))
            self.assertEqual({len(branch) for branch in outcome.codes}, {outcome.active_steps})
            seen.add(outcome.active_steps)
        self.assertGreater(len(seen), 1)

    def test_losses(self):
        books = self._books(1, 8, 4)
        g = FeatureGrid(self.rng.normal(size=(3, 3, 4)))
        losses = hier_encode(g, parse_variant("XQ-V"), books).losses
        self.assertAlmostEqual(losses['vq'], 1.25 * losses['recon'], places=12)
        self.assertEqual(losses['aux'], 0.0)
        self.assertAlmostEqual(losses['total'], losses['recon'] + losses['vq'], places=12)
        binary = hier_encode(g, parse_variant("XQ-B"), None).losses
        self.assertLess(binary['aux'], 0.0)

    def test_mismatches(self):
        g = FeatureGrid(self.rng.normal(size=(4, 4, 4)))
        with self.assertRaises(ShapeMismatchError):
            hier_encode(g, parse_variant("XQ-V"), self._books(1, 8, 3))
        with self.assertRaises(ConfigError):
            hier_encode(g, parse_variant("XQ-V-P2"), self._books(1, 8, 2))
        with self.assertRaises(ConfigError):
            hier_encode(g, parse_variant("XQ-L"), self._books(1, 8, 4))
        with self.assertRaises(ConfigError):
            hier_encode(FeatureGrid(self.rng.normal(size=(2, 2, 3))), parse_variant("XQ-V-P2"), None)
        with self.assertRaises(ShapeMismatchError):
            hier_encode(FeatureGrid(self.rng.normal(size=(2, 3, 4))), parse_variant("XQ-MS-L-R2"))

    def test_training_samples(self):
        spec = parse_variant("XQ-MS-V-R3-P2").with_runtime(schedule=ScaleSchedule((1, 2, 4)))
        grids = [FeatureGrid(self.rng.normal(size=(4, 4, 6))) for _ in range(2)]
        pools = pyramid_samples(grids, spec)
        self.assertEqual([p.shape for p in pools], [(2 * 21, 3), (2 * 21, 3)])
        books = self._books(2, 8, 3)
        inputs = collect_step_inputs(grids, spec, books)
        self.assertEqual([p.shape for p in inputs], [(2 * 21, 3), (2 * 21, 3)])


if __name__ == '__main__':
    unittest.main(verbosity=2)
