#!/usr/bin/env python3
"""
End-to-end tests for the xq_codec command line.
"""

import io
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

import numpy as np

from codec_io import read_codebook, read_features, write_codebook, write_features
from core import Codebook, FeatureGrid
from hierarchy import hier_encode, parse_variant
from image_io import save_png
from xq_codec import main


def gradient_image(size=64):
    y, x = np.mgrid[0:size, 0:size]
    step = 256 // size
    return np.stack([x * step, y * step, (x + y) * step // 2], axis=-1).astype(np.uint8)


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def run_cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = main([str(a) for a in argv])
        return code, out.getvalue(), err.getvalue()

    def values(self, text):
        return dict(line.split('=', 1) for line in text.splitlines() if '=' in line)

    def read_bytes(self, name):
        with open(self.path(name), 'rb') as f:
            return f.read()


class TestImageRoundTrip(CliTestCase):
    """fit -> encode -> decode on a PNG image."""

    def setUp(self):
        super().setUp()
        save_png(self.path('image.png'), gradient_image())

    def pipeline(self, tag):
        variant = ['--variant', 'XQ-MS-V-R4']
        code, out, err = self.run_cli('fit', '--input', self.path('image.png'), '--patch', 4, *variant,
                                      '--codebook-size', 256, '--seed', 42, '--out', self.path(f'{tag}.xqcb'))
        self.assertEqual(code, 0, err)
        self.assertIn('codebook=', out)
        code, out, err = self.run_cli('encode', '--image', self.path('image.png'), '--patch', 4, *variant,
                                      '--codebooks', self.path(f'{tag}.xqcb'), '--out', self.path(f'{tag}.xqcs'))
        self.assertEqual(code, 0, err)
        encoded = self.values(out)
        code, out, err = self.run_cli('decode', '--stream', self.path(f'{tag}.xqcs'),
                                      '--codebooks', self.path(f'{tag}.xqcb'), '--patch', 4,
                                      '--reference', self.path('image.png'), '--out', self.path(f'{tag}.png'))
        self.assertEqual(code, 0, err)
        return encoded, self.values(out)

    def test_quality_and_reproducibility(self):
        first, decoded = self.pipeline('a')
        self.pipeline('b')
        self.assertGreaterEqual(float(first['psnr']), 20.0)
        self.assertEqual(decoded['psnr'], first['psnr'])
        self.assertEqual(first['tokens'], str(16 + 64 + 144 + 256))
        self.assertEqual(first['bits'], str(480 * 8))
        for ext in ('xqcb', 'xqcs', 'png'):
            self.assertEqual(self.read_bytes(f'a.{ext}'), self.read_bytes(f'b.{ext}'))

    def test_step_errors_are_reported(self):
        self.pipeline('a')
        code, out, _ = self.run_cli('encode', '--image', self.path('image.png'), '--patch', 4,
                                    '--variant', 'XQ-MS-V-R4', '--codebooks', self.path('a.xqcb'),
                                    '--out', self.path('c.xqcs'))
        self.assertEqual(code, 0)
        mses = [float(line.split('mse=')[1]) for line in out.splitlines() if line.startswith('step=')]
        self.assertEqual(len(mses), 4)
        self.assertLess(mses[-1], mses[0])

    def test_flat_image_is_lossless(self):
        save_png(self.path('gray.png'), np.full((16, 16, 3), 128, dtype=np.uint8))
        code, _, err = self.run_cli('fit', '--input', self.path('gray.png'), '--patch', 4, '--variant', 'XQ-V',
                                    '--codebook-size', 1, '--out', self.path('gray.xqcb'))
        self.assertEqual(code, 0, err)
        code, out, err = self.run_cli('encode', '--image', self.path('gray.png'), '--patch', 4, '--variant', 'XQ-V',
                                      '--codebooks', self.path('gray.xqcb'), '--out', self.path('gray.xqcs'))
        self.assertEqual(code, 0, err)
        self.assertEqual(self.values(out)['psnr'], 'inf')

    def test_codebook_dimension_mismatch(self):
        code, _, err = self.run_cli('fit', '--input', self.path('image.png'), '--patch', 2, '--variant', 'XQ-V',
                                    '--codebook-size', 16, '--out', self.path('small.xqcb'))
        self.assertEqual(code, 0, err)
        code, _, err = self.run_cli('encode', '--image', self.path('image.png'), '--patch', 4, '--variant', 'XQ-V',
                                    '--codebooks', self.path('small.xqcb'), '--out', self.path('bad.xqcs'))
        self.assertEqual(code, 3)
        self.assertTrue(err.startswith('Error:'))
        self.assertFalse(os.path.exists(self.path('bad.xqcs')))


class TestStats(CliTestCase):
    """encode --features followed by stats."""

    def setUp(self):
        super().setUp()
        write_features(self.path('grid.f32'), np.random.default_rng(0).normal(size=(256, 4)))

    def encode(self, variant, out, *extra):
        code, _, err = self.run_cli('encode', '--features', self.path('grid.f32'), '--variant', variant,
                                    '--schedule', 'var', '--out', self.path(out), *extra)
        self.assertEqual(code, 0, err)

    def test_var_schedule_tokens(self):
        self.encode('XQ-MS-L-R10', 'one.xqcs')
        code, out, err = self.run_cli('stats', '--stream', self.path('one.xqcs'), '--dim', 4)
        self.assertEqual(code, 0, err)
        values = self.values(out)
        self.assertEqual(values['tokens'], '680')
        self.assertEqual(values['bits'], str(680 * 4))
        self.assertEqual(values['schedule'], '1,2,3,4,5,6,8,10,13,16')
        self.assertLessEqual(float(values['utilization.p0']), 1.0)

        self.encode('XQ-MS-L-R10-P2', 'two.xqcs')
        code, out, _ = self.run_cli('stats', '--stream', self.path('two.xqcs'))
        self.assertEqual(code, 0)
        self.assertEqual(self.values(out)['tokens'], '1360')

    def test_truncated_encode(self):
        self.encode('XQ-MS-L-R10', 'short.xqcs', '--active-steps', 3)
        code, out, _ = self.run_cli('stats', '--stream', self.path('short.xqcs'))
        self.assertEqual(code, 0)
        self.assertEqual(self.values(out)['tokens'], str(1 + 4 + 9))

    def test_csv_and_html(self):
        self.encode('XQ-MS-L-R10', 'one.xqcs')
        code, _, err = self.run_cli('stats', '--stream', self.path('one.xqcs'), '--dim', 4,
                                    '--csv', self.path('hist.csv'), '--html', self.path('usage.html'))
        self.assertEqual(code, 0, err)
        with open(self.path('hist.csv')) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], 'branch,step,side,code,count')
        self.assertEqual(sum(int(line.split(',')[-1]) for line in lines[1:]), 680)
        self.assertIn('xq-stats', self.read_bytes('usage.html').decode('utf-8'))

    def test_outputs_are_all_or_nothing(self):
        self.encode('XQ-MS-L-R10', 'one.xqcs')
        code, _, err = self.run_cli('stats', '--stream', self.path('one.xqcs'), '--dim', 4,
                                    '--csv', self.path('ok.csv'),
                                    '--html', self.path(os.path.join('missing', 'u.html')))
        self.assertEqual(code, 4)
        self.assertTrue(err.startswith('Error:'))
        self.assertFalse(os.path.exists(self.path('ok.csv')))

    def test_full_width_binary_codes(self):
        write_features(self.path('wide.f32'), np.random.default_rng(2).normal(size=(16, 32)))
        code, _, err = self.run_cli('encode', '--features', self.path('wide.f32'), '--side', 4,
                                    '--variant', 'XQ-L', '--out', self.path('wide.xqcs'))
        self.assertEqual(code, 0, err)
        code, out, err = self.run_cli('stats', '--stream', self.path('wide.xqcs'), '--dim', 32)
        self.assertEqual(code, 0, err)
        values = self.values(out)
        self.assertEqual(values['tokens'], '16')
        self.assertEqual(values['bits'], str(16 * 32))
        self.assertEqual(values['utilization.p0'], '0.000000')
        self.assertAlmostEqual(float(values['perplexity.p0']), 16.0, delta=1e-4)

    def test_truncated_stream_file(self):
        self.encode('XQ-MS-L-R10', 'one.xqcs')
        data = self.read_bytes('one.xqcs')
        with open(self.path('cut.xqcs'), 'wb') as f:
            f.write(data[:len(data) // 2])
        code, _, err = self.run_cli('stats', '--stream', self.path('cut.xqcs'))
        self.assertEqual(code, 3)
        self.assertIn('offset', err)

    def test_missing_stream_file(self):
        code, _, _ = self.run_cli('stats', '--stream', self.path('nope.xqcs'))
        self.assertEqual(code, 4)


class TestFit(CliTestCase):
    """fit on raw features and image directories."""

    def objective(self, out):
        return float(out.split('objective=')[1].split()[0])

    def test_two_clusters_reach_noise_floor(self):
        rng = np.random.default_rng(3)
        noise, per_cluster = 0.1, 25_000
        samples = np.vstack([rng.normal(scale=noise, size=(per_cluster, 2)) + 5.0,
                             rng.normal(scale=noise, size=(per_cluster, 2)) - 5.0])
        write_features(self.path('clusters.f32'), samples)
        code, out, err = self.run_cli('fit', '--input', self.path('clusters.f32'), '--variant', 'XQ-V',
                                      '--codebook-size', 2, '--seed', 0, '--out', self.path('cb.xqcb'))
        self.assertEqual(code, 0, err)
        # expected squared distance to the cluster mean is d * sigma^2
        floor = 2 * noise ** 2
        self.assertLessEqual(abs(self.objective(out) - floor), 0.05 * floor)
        centers = sorted(read_codebook(self.path('cb.xqcb')).entries[:, 0])
        self.assertAlmostEqual(centers[0], -5.0, delta=0.01)
        self.assertAlmostEqual(centers[1], 5.0, delta=0.01)

    def test_branch_codebooks_written_together(self):
        write_features(self.path('x.f32'), np.random.default_rng(4).normal(size=(400, 4)))
        os.mkdir(self.path('cb.p1.xqcb'))
        code, out, _ = self.run_cli('fit', '--input', self.path('x.f32'), '--variant', 'XQ-V-P2',
                                    '--codebook-size', 4, '--out', self.path('cb.xqcb'))
        self.assertEqual(code, 4)
        self.assertNotIn('codebook=', out)
        self.assertFalse(os.path.exists(self.path('cb.p0.xqcb')))

    def test_image_directory(self):
        os.mkdir(self.path('images'))
        rng = np.random.default_rng(8)
        for k in range(5):
            save_png(self.path(os.path.join('images', f'{k}.png')),
                     rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))
        for tag in ('a', 'b'):
            code, out, err = self.run_cli('fit', '--input', self.path('images'), '--patch', 4,
                                          '--variant', 'XQ-V', '--codebook-size', 8, '--seed', 1,
                                          '--out', self.path(f'{tag}.xqcb'))
            self.assertEqual(code, 0, err)
            self.assertIn('heldout=8', out)
        self.assertEqual(self.read_bytes('a.xqcb'), self.read_bytes('b.xqcb'))


class TestRawDecode(CliTestCase):
    """decode to raw float32 reproduces the library reconstruction."""

    def setUp(self):
        super().setUp()
        write_features(self.path('grid.f32'), np.random.default_rng(6).normal(size=(256, 4)))
        self.grid = FeatureGrid.from_array(read_features(self.path('grid.f32')), 16, 16)

    def check(self, variant, codebook_args=(), decode_args=()):
        code, _, err = self.run_cli('encode', '--features', self.path('grid.f32'), '--variant', variant,
                                    *codebook_args, '--out', self.path('s.xqcs'))
        self.assertEqual(code, 0, err)
        code, _, err = self.run_cli('decode', '--stream', self.path('s.xqcs'), *codebook_args, *decode_args,
                                    '--out', self.path('out.f32'))
        self.assertEqual(code, 0, err)
        books = [read_codebook(p) for p in codebook_args[1:]] or None
        spec = parse_variant(variant).with_runtime(dim=4)
        expected = hier_encode(self.grid, spec, books).quantized.vectors().astype(np.float32)
        np.testing.assert_array_equal(read_features(self.path('out.f32')), expected)

    def test_multiscale_vq(self):
        rng = np.random.default_rng(9)
        paths = []
        for p in range(2):
            paths.append(self.path(f'cb.p{p}.xqcb'))
            write_codebook(paths[-1], Codebook(rng.normal(size=(16, 2))))
        self.check('XQ-MS-V-R3-P2', ['--codebooks', *paths])

    def test_residual_lfq(self):
        self.check('XQ-L-R2', decode_args=['--dim', 4])

    def test_multiscale_bsq(self):
        self.check('XQ-MS-B-R3-P2', decode_args=['--dim', 4])


class TestUsage(CliTestCase):
    """Argument and configuration errors."""

    def test_unknown_flag(self):
        code, _, _ = self.run_cli('encode', '--bogus')
        self.assertEqual(code, 2)

    def test_help(self):
        code, out, _ = self.run_cli('--help')
        self.assertEqual(code, 0)
        self.assertIn('fit', out)

    def test_codebook_larger_than_training_set(self):
        write_features(self.path('few.f32'), np.random.default_rng(1).normal(size=(20, 4)))
        code, _, err = self.run_cli('fit', '--input', self.path('few.f32'), '--variant', 'XQ-V',
                                    '--codebook-size', 64, '--out', self.path('cb.xqcb'))
        self.assertEqual(code, 3)
        self.assertIn('64', err)
        self.assertIn('18', err)
        self.assertFalse(os.path.exists(self.path('cb.xqcb')))

    def test_non_image_input(self):
        with open(self.path('notes.png'), 'w') as f:
            f.write('not an image\n')
        code, _, err = self.run_cli('encode', '--image', self.path('notes.png'), '--variant', 'XQ-L',
                                    '--out', self.path('x.xqcs'))
        self.assertEqual(code, 3)
        self.assertIn('not an image', err)

    def test_bad_variant(self):
        write_features(self.path('x.f32'), np.zeros((4, 4)))
        code, _, err = self.run_cli('encode', '--features', self.path('x.f32'), '--variant', 'XQ-Q',
                                    '--out', self.path('x.xqcs'))
        self.assertEqual(code, 3)
        self.assertIn('position 3', err)


if __name__ == '__main__':
    unittest.main(verbosity=2)
