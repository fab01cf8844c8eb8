#!/usr/bin/env python3
"""
XQ hierarchical quantization codec

Fit codebooks, encode PNG images or raw feature files into code streams,
decode them back and report stream statistics.

Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.
The log level is read from XQ_LOG (error, info, debug).
"""

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from codec_io import (
    CodeStream,
    atomic_write_all,
    read_codebook,
    read_features,
    read_stream,
    stream_bits,
    write_codebooks,
    write_features,
    write_stream,
)
from config import (
    DEFAULT_BLEND_GAMMA,
    DEFAULT_BLEND_KERNEL_SIZE,
    DEFAULT_LOG_LEVEL,
    DEFAULT_PATCH_SIZE,
    EXIT_CODES,
    KMEANS_CONFIG,
    LOAD_WORKERS,
    LOG_ENV_VAR,
    LOG_LEVELS,
)
from core import Codebook, ConfigError, FeatureGrid, Rng, ShapeMismatchError, XQError
from hierarchy import HierarchySpec, collect_step_inputs, hier_decode, hier_encode, parse_variant, pyramid_samples
from image_io import PatchConfig, format_psnr, list_pngs, load_png, patchify, psnr, save_png, to_pixels, unpatchify
from leaf_quantizers import code_limit, nearest_codewords
from multiscale import BlendFilter, parse_schedule
from stats_report import StatsChartExporter, stats_tables, summary_lines
from training import UtilizationTracker, fit_residual_codebooks, utilization

logger = logging.getLogger('xq_codec')


def configure_logging() -> None:
    """Configure the root logger from XQ_LOG, writing to stderr."""
    name = os.environ.get(LOG_ENV_VAR, DEFAULT_LOG_LEVEL).strip().lower()
    unknown = name not in LOG_LEVELS
    level = LOG_LEVELS[DEFAULT_LOG_LEVEL if unknown else name]
    logging.basicConfig(level=level, stream=sys.stderr, force=True,
                        format='%(levelname)s %(name)s: %(message)s')
    if unknown:
        logger.warning("unknown %s value '%s', using '%s'", LOG_ENV_VAR, name, DEFAULT_LOG_LEVEL)


# -- input helpers ---------------------------------------------------------------

def _square_side(count: int, side: Optional[int]) -> int:
    if side is None:
        side = math.isqrt(count)
        if side * side != count:
            raise ShapeMismatchError(f"{count} feature vectors do not form a square grid; pass --side")
    return side


def _feature_grids(samples: np.ndarray, side: Optional[int], spec: HierarchySpec) -> List[FeatureGrid]:
    """Cut raw samples into K x K grids, or one 1 x M row for single-scale fits."""
    count = samples.shape[0]
    if side is None and not spec.multiscale:
        return [FeatureGrid.from_array(samples, 1, count)]
    if side is None:
        side = _square_side(count, None)
    if side < 1 or count % (side * side):
        raise ShapeMismatchError(f"{count} feature vectors are not a whole number of {side}x{side} grids")
    per = side * side
    return [FeatureGrid.from_array(samples[k:k + per], side, side) for k in range(0, count, per)]


def _load_fit_grids(args, spec: HierarchySpec) -> Tuple[List[FeatureGrid], Optional[PatchConfig]]:
    patch = PatchConfig(args.patch)
    if os.path.isdir(args.input):
        paths = list_pngs(args.input)
        # map keeps input order
        with ThreadPoolExecutor(max_workers=LOAD_WORKERS) as pool:
            grids = list(pool.map(lambda path: patchify(load_png(path), patch), paths))
    elif args.input.lower().endswith('.png'):
        grids = [patchify(load_png(args.input), patch)]
    else:
        samples = read_features(args.input)
        if args.dim is not None and samples.shape[1] != args.dim:
            raise ShapeMismatchError(f"--dim {args.dim} does not match the feature dimension {samples.shape[1]}")
        return _feature_grids(samples, args.side, spec), None
    if args.dim is not None and args.dim != patch.dim:
        raise ShapeMismatchError(f"--dim {args.dim} does not match 3 x {args.patch}^2 = {patch.dim}")
    return grids, patch


def _build_spec(args, dim: int) -> HierarchySpec:
    spec = parse_variant(args.variant)
    schedule = None
    if getattr(args, 'schedule', None):
        if not spec.multiscale:
            raise ConfigError(f"--schedule needs a multi-scale variant, got {spec.name}")
        schedule = parse_schedule(args.schedule)
    return spec.with_runtime(dim=dim, schedule=schedule)


def _blend(args) -> BlendFilter:
    return BlendFilter.box(args.kernel_size, args.gamma)


def _load_codebooks(paths: Optional[Sequence[str]], spec: HierarchySpec) -> Optional[List[Codebook]]:
    if spec.leaf.is_binary:
        if paths:
            raise ConfigError(f"{spec.name} uses a {spec.leaf.name} leaf and takes no codebooks")
        return None
    if not paths:
        raise ConfigError(f"{spec.name} needs --codebooks (one per product branch)")
    return [read_codebook(path) for path in paths]


def _code_limits(spec: HierarchySpec, codebooks: Optional[List[Codebook]], dim: Optional[int]) -> Optional[List[int]]:
    if codebooks:
        return [cb.size for cb in codebooks]
    if dim is None:
        return None
    return [code_limit(spec.leaf, dim // spec.product_branches)] * spec.product_branches


def _branch_paths(out: str, branches: int) -> List[str]:
    if branches == 1:
        return [out]
    root, ext = os.path.splitext(out)
    return [f"{root}.p{p}{ext or '.xqcb'}" for p in range(branches)]


def _holdout_split(pool: np.ndarray, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    count = pool.shape[0]
    held = int(round(count * KMEANS_CONFIG['holdout_fraction'])) if count > 1 else 0
    order = rng.permutation(count)
    return pool[order[held:]], pool[order[:held]]


# -- commands --------------------------------------------------------------------

def cmd_fit(args) -> int:
    spec = parse_variant(args.variant)
    if spec.leaf.is_binary:
        raise ConfigError(f"{spec.name} has no VQ branches to fit")
    grids, _ = _load_fit_grids(args, spec)
    spec = _build_spec(args, grids[0].dim)
    rng = Rng(args.seed)
    blend_filter = _blend(args)

    held_out: List[np.ndarray] = []

    def split(pools):
        train = []
        held_out.clear()
        for pool in pools:
            fit_part, held = _holdout_split(pool, rng)
            if fit_part.shape[0] < args.codebook_size:
                raise ConfigError(
                    f"codebook size {args.codebook_size} exceeds the {fit_part.shape[0]} training samples"
                )
            train.append(fit_part)
            held_out.append(held)
        return train

    def step_inputs(books):
        return split(collect_step_inputs(grids, spec, books, blend_filter))

    refine = spec.residual_steps > 1
    books, traces = fit_residual_codebooks(
        split(pyramid_samples(grids, spec)),
        args.codebook_size,
        step_inputs,
        rounds=args.rounds if refine else 0,
        iters=args.iters,
        rng=rng,
        zero_augment=refine,
    )

    paths = _branch_paths(args.out, spec.product_branches)
    for p, cb in enumerate(books):
        held = held_out[p] if held_out[p].shape[0] else None
        if held is not None:
            codes, dist = nearest_codewords(held, cb.entries)
            tracker = UtilizationTracker(cb.size)
            tracker.record(codes)
            print(f"branch={p} objective={float(np.mean(dist)):.6g} "
                  f"utilization={utilization(tracker):.6f} heldout={held.shape[0]}")
        else:
            print(f"branch={p} objective={traces[p][-1]:.6g}")
    write_codebooks(paths, books)
    for path in paths:
        print(f"codebook={path}")
    return EXIT_CODES['ok']


def _encode_input(args) -> Tuple[FeatureGrid, Optional[np.ndarray], Optional[PatchConfig]]:
    if args.image:
        patch = PatchConfig(args.patch)
        image = load_png(args.image)
        return patchify(image, patch), image, patch
    samples = read_features(args.features)
    side = _square_side(samples.shape[0], args.side)
    if samples.shape[0] != side * side:
        raise ShapeMismatchError(f"{samples.shape[0]} feature vectors do not form a {side}x{side} grid")
    return FeatureGrid.from_array(samples, side, side), None, None


def cmd_encode(args) -> int:
    grid, image, patch = _encode_input(args)
    spec = _build_spec(args, grid.dim)
    codebooks = _load_codebooks(args.codebooks, spec)
    outcome = hier_encode(grid, spec, codebooks, blend_filter=_blend(args), active_steps=args.active_steps)
    stream = CodeStream.from_outcome(outcome, spec)

    for i, err in enumerate(outcome.step_errors):
        print(f"step={i} mse={err:.6g}")
    print(f"tokens={outcome.tokens}")
    print(f"bits={outcome.total_bits}")
    if image is not None:
        restored = to_pixels(unpatchify(outcome.quantized, patch))
        print(f"psnr={format_psnr(psnr(image, restored))}")
    write_stream(args.out, stream)
    print(f"stream={args.out}")
    return EXIT_CODES['ok']


def cmd_decode(args) -> int:
    stream = read_stream(args.stream)
    spec = stream.spec
    codebooks = _load_codebooks(args.codebooks, spec)
    limits = _code_limits(spec, codebooks, args.dim)
    if limits is not None:
        stream.check_range(limits)
    grid = hier_decode(stream.codes, spec, codebooks, schedule=stream.schedule,
                       blend_filter=_blend(args), dim=args.dim)
    if args.out.lower().endswith('.png'):
        patch = PatchConfig(args.patch)
        restored = to_pixels(unpatchify(grid, patch))
        if args.reference:
            print(f"psnr={format_psnr(psnr(load_png(args.reference), restored))}")
        save_png(args.out, restored)
    else:
        write_features(args.out, grid.vectors())
    print(f"output={args.out}")
    return EXIT_CODES['ok']


def cmd_stats(args) -> int:
    stream = read_stream(args.stream)
    spec = stream.spec
    codebooks = _load_codebooks(args.codebooks, spec) if args.codebooks else None
    limits = _code_limits(spec, codebooks, args.dim)
    if limits is not None:
        stream.check_range(limits)

    bits = None
    if codebooks:
        bits = stream_bits(stream, spec.with_runtime(codebook_sizes=tuple(cb.size for cb in codebooks)))
    elif spec.leaf.is_binary and args.dim is not None:
        bits = stream_bits(stream, spec.with_runtime(dim=args.dim))

    tables = stats_tables(stream, limits)
    for line in summary_lines(stream, bits, tables['usage'], tables['histogram']):
        print(line)
    outputs = []
    if args.csv:
        outputs.append((args.csv, tables['histogram'].to_csv(index=False).encode('utf-8')))
    if args.html:
        outputs.append((args.html, StatsChartExporter.export_html(stream, tables['histogram'], tables['usage'])))
    atomic_write_all(outputs)
    return EXIT_CODES['ok']


# -- argument parsing ------------------------------------------------------------

def _add_blend_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--gamma', type=float, default=DEFAULT_BLEND_GAMMA,
                        help=f'Multi-scale blend weight (default: {DEFAULT_BLEND_GAMMA})')
    parser.add_argument('--kernel-size', type=int, default=DEFAULT_BLEND_KERNEL_SIZE,
                        help=f'Side of the box blend kernel (default: {DEFAULT_BLEND_KERNEL_SIZE})')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='xq_codec.py',
        description="XQ hierarchical quantization codec",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
        epilog="""
Examples:
  # Fit a 256-entry codebook on an image, 4x4 patches
  python xq_codec.py fit --input image.png --patch 4 \\
    --variant XQ-MS-V-R4 --codebook-size 256 --seed 42 --out cb.xqcb

  # Encode and decode
  python xq_codec.py encode --image image.png --patch 4 \\
    --variant XQ-MS-V-R4 --codebooks cb.xqcb --out image.xqcs
  python xq_codec.py decode --stream image.xqcs --codebooks cb.xqcb \\
    --patch 4 --out restored.png

  # Token and utilization report
  python xq_codec.py stats --stream image.xqcs --codebooks cb.xqcb --csv hist.csv
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    fit = sub.add_parser('fit', help='Fit VQ codebooks (one file per product branch)', allow_abbrev=False)
    fit.add_argument('--input', required=True,
                     help='PNG image, directory of PNG images, or raw float32 feature file')
    fit.add_argument('--dim', type=int, help='Expected feature dimension')
    fit.add_argument('--side', type=int, help='Grid side for raw features (K x K vectors per grid)')
    fit.add_argument('--patch', type=int, default=DEFAULT_PATCH_SIZE,
                     help=f'Patch side for images (default: {DEFAULT_PATCH_SIZE})')
    fit.add_argument('--variant', required=True, help='Variant name, e.g. XQ-MS-V-R4')
    fit.add_argument('--schedule', help="Scale schedule, comma-separated sides or a preset ('var')")
    fit.add_argument('--codebook-size', type=int, required=True, help='Codewords per branch J')
    fit.add_argument('--iters', type=int, default=KMEANS_CONFIG['iters'],
                     help=f"Lloyd iterations (default: {KMEANS_CONFIG['iters']})")
    fit.add_argument('--rounds', type=int, default=KMEANS_CONFIG['refine_rounds'],
                     help=f"Residual refinement rounds (default: {KMEANS_CONFIG['refine_rounds']})")
    fit.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    fit.add_argument('--out', required=True, help='Output codebook path')
    _add_blend_args(fit)
    fit.set_defaults(func=cmd_fit)

    enc = sub.add_parser('encode', help='Encode an image or feature file into a code stream', allow_abbrev=False)
    source = enc.add_mutually_exclusive_group(required=True)
    source.add_argument('--image', help='PNG image')
    source.add_argument('--features', help='Raw float32 feature file')
    enc.add_argument('--side', type=int, help='Grid side for raw features')
    enc.add_argument('--patch', type=int, default=DEFAULT_PATCH_SIZE,
                     help=f'Patch side for images (default: {DEFAULT_PATCH_SIZE})')
    enc.add_argument('--variant', required=True, help='Variant name')
    enc.add_argument('--codebooks', nargs='+', help='Codebook files, one per branch (VQ variants)')
    enc.add_argument('--schedule', help='Scale schedule for multi-scale variants')
    enc.add_argument('--active-steps', type=int, help='Keep only the first n residual steps')
    enc.add_argument('--out', required=True, help='Output stream path')
    _add_blend_args(enc)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser('decode', help='Decode a code stream to PNG or raw features', allow_abbrev=False)
    dec.add_argument('--stream', required=True, help='Code stream file')
    dec.add_argument('--codebooks', nargs='+', help='Codebook files, one per branch (VQ variants)')
    dec.add_argument('--dim', type=int, help='Feature dimension (LFQ/BSQ variants)')
    dec.add_argument('--patch', type=int, default=DEFAULT_PATCH_SIZE,
                     help=f'Patch side for PNG output (default: {DEFAULT_PATCH_SIZE})')
    dec.add_argument('--reference', help='Original PNG; prints the PSNR of the decoded image')
    dec.add_argument('--out', required=True, help='Output path (.png, otherwise raw float32)')
    _add_blend_args(dec)
    dec.set_defaults(func=cmd_decode)

    stats = sub.add_parser('stats', help='Token, bit and utilization report', allow_abbrev=False)
    stats.add_argument('--stream', required=True, help='Code stream file')
    stats.add_argument('--codebooks', nargs='+', help='Codebook files (VQ variants)')
    stats.add_argument('--dim', type=int, help='Feature dimension (LFQ/BSQ variants)')
    stats.add_argument('--csv', help='Write the per-step code histogram as CSV')
    stats.add_argument('--html', help='Write an HTML usage chart')
    stats.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI function; returns the exit code."""
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CODES['ok'] if exc.code in (0, None) else EXIT_CODES['usage']

    try:
        return args.func(args)
    except XQError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CODES['data']
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CODES['io']


if __name__ == "__main__":
    sys.exit(main())
