"""
Binary formats for codebooks, code streams and raw feature files

Codebook file (XQCB), all integers little-endian:
    magic "XQCB" | version u8 = 1 | 3 reserved zero bytes | J u32 | d u32 |
    J x d float32 entries, row-major

Code stream file (XQCS):
    magic "XQCS" | version u8 = 1 | name length u16 | canonical variant name |
    grid side K u16 | schedule length u8 | s_i u16 ... | P u8 | active steps n u8 |
    for each branch p, for each step i < n: s_i^2 codes as u32

Raw feature files are little-endian float32 arrays with a text sidecar
"<file>.hdr" holding "count=<M>" and "dim=<d>" lines.

Writers go through a temporary file in the target directory and rename it
on success, so a failed write never leaves a partial file behind.
"""

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core import CodeGrid, CodeRangeError, Codebook, ConfigError, FormatError, NonFiniteError, ShapeMismatchError
from hierarchy import HierarchySpec, QuantOutcome, format_variant, parse_variant
from leaf_quantizers import code_bits
from multiscale import ScaleSchedule

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b'XQCB'
STREAM_MAGIC = b'XQCS'
FORMAT_VERSION = 1
CODEBOOK_HEADER_SIZE = 16
HEADER_SUFFIX = '.hdr'


def _stage(path: str, data: bytes) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
    except BaseException:
        os.remove(tmp)
        raise
    return tmp


def atomic_write_all(items: Sequence[Tuple[str, bytes]]) -> None:
    """
    Write several files as one unit.

    Every file is first written to a temporary sibling; only when all of
    them are staged are they moved into place with os.replace. On failure
    the staged files and any outputs already moved are removed, so either
    all paths are written or none is.
    """
    staged: List[Tuple[str, str]] = []
    placed: List[str] = []
    try:
        for path, data in items:
            staged.append((_stage(path, data), path))
        for tmp, path in staged:
            os.replace(tmp, path)
            placed.append(path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.remove(tmp)
        for path in placed:
            os.remove(path)
        raise


def atomic_write(path: str, data: bytes) -> None:
    """Write bytes to path via a temporary file and os.replace."""
    atomic_write_all([(path, data)])


def _read_file(path: str) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


class _Reader:
    """Bounds-checked little-endian reader over a byte string."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.offset = 0
        self.what = what

    def take(self, size: int, field_name: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated {self.what} {field_name}", self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def uint(self, fmt: str, field_name: str) -> int:
        return struct.unpack('<' + fmt, self.take(struct.calcsize(fmt), field_name))[0]

    def array(self, dtype: str, count: int, field_name: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, field_name)
        return np.frombuffer(raw, dtype=dtype, count=count)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes after {self.what}", self.offset)


# -- codebooks -----------------------------------------------------------------

def encode_codebook(cb: Codebook) -> bytes:
    """Serialize a codebook; entries are stored as float32."""
    entries = cb.entries.astype('<f4')
    if not np.all(np.isfinite(entries)):
        raise NonFiniteError("codebook entries overflow float32")
    header = CODEBOOK_MAGIC + struct.pack('<B3xII', FORMAT_VERSION, cb.size, cb.dim)
    return header + entries.tobytes(order='C')


def decode_codebook(data: bytes) -> Codebook:
    """Parse an XQCB byte string."""
    if len(data) < CODEBOOK_HEADER_SIZE:
        raise FormatError("truncated header", 0)
    reader = _Reader(data, 'codebook')
    magic = reader.take(4, 'magic')
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"magic mismatch: expected {CODEBOOK_MAGIC!r}, got {magic!r}", 0)
    version = reader.uint('B', 'version')
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported codebook version {version}", 4)
    if reader.take(3, 'reserved bytes') != b'\x00\x00\x00':
        raise FormatError("reserved bytes must be zero", 5)
    size = reader.uint('I', 'size')
    dim = reader.uint('I', 'dim')
    if size == 0 or dim == 0:
        raise FormatError(f"codebook must have J >= 1 and d >= 1, got J={size}, d={dim}", 8 if size == 0 else 12)
    entries = reader.array('<f4', size * dim, 'entries')
    reader.finish()
    try:
        return Codebook(entries.astype(np.float64).reshape(size, dim))
    except NonFiniteError:
        raise FormatError("codebook entries must be finite", CODEBOOK_HEADER_SIZE)


def write_codebook(path: str, cb: Codebook) -> None:
    atomic_write(path, encode_codebook(cb))
    logger.debug("wrote codebook J=%d d=%d to %s", cb.size, cb.dim, path)


def write_codebooks(paths: Sequence[str], books: Sequence[Codebook]) -> None:
    """Write one codebook per path; no file is left behind if any write fails."""
    if len(paths) != len(books):
        raise ConfigError(f"{len(books)} codebooks for {len(paths)} output paths")
    atomic_write_all([(path, encode_codebook(cb)) for path, cb in zip(paths, books)])
    logger.debug("wrote %d codebooks", len(books))


def read_codebook(path: str) -> Codebook:
    return decode_codebook(_read_file(path))


# -- code streams --------------------------------------------------------------

@dataclass(eq=False)
class CodeStream:
    """
    In-memory image of an XQCS file.

    codes[p][i] is the s_i x s_i code grid of branch p at step i, for the
    n active steps.
    """
    variant: str
    side: int
    resolutions: Tuple[int, ...]
    codes: List[List[CodeGrid]] = field(default_factory=list)

    def __post_init__(self):
        spec = parse_variant(self.variant)
        if format_variant(spec) != self.variant:
            raise ConfigError(f"variant '{self.variant}' is not canonical, use '{format_variant(spec)}'")
        self.resolutions = tuple(int(s) for s in self.resolutions)
        if len(self.resolutions) != spec.residual_steps:
            raise ConfigError(f"schedule has {len(self.resolutions)} steps, {self.variant} has {spec.residual_steps}")
        if not spec.multiscale and any(s != self.side for s in self.resolutions):
            raise ConfigError(f"single-scale variant {self.variant} needs every step at side {self.side}")
        schedule = ScaleSchedule(self.resolutions)
        schedule.check_side(self.side)
        if self.side > 0xFFFF:
            raise ConfigError(f"grid side {self.side} does not fit a u16")
        if len(self.codes) != spec.product_branches:
            raise ConfigError(f"{len(self.codes)} code branches for {self.variant}")
        steps = {len(branch) for branch in self.codes}
        if len(steps) != 1 or not 1 <= min(steps) <= spec.residual_steps:
            raise ConfigError(f"branches must carry the same number of steps in [1, {spec.residual_steps}]")
        for branch in self.codes:
            for i, grid in enumerate(branch):
                s = self.resolutions[i]
                if grid.codes.shape != (s, s):
                    raise ShapeMismatchError(f"step {i} codes have shape {grid.codes.shape}, expected {s}x{s}")

    @classmethod
    def from_outcome(cls, outcome: QuantOutcome, spec: HierarchySpec) -> 'CodeStream':
        if outcome.schedule is None:
            raise ShapeMismatchError("code streams need a square grid")
        return cls(format_variant(spec), outcome.schedule.side, outcome.schedule.resolutions,
                   [list(branch) for branch in outcome.codes])

    @property
    def spec(self) -> HierarchySpec:
        return parse_variant(self.variant)

    @property
    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.resolutions)

    @property
    def branches(self) -> int:
        return len(self.codes)

    @property
    def active_steps(self) -> int:
        return len(self.codes[0])

    @property
    def tokens(self) -> int:
        return self.branches * sum(s * s for s in self.resolutions[:self.active_steps])

    def check_range(self, limits: Sequence[int]) -> None:
        """Reject codes >= the code limit of their branch."""
        if len(limits) != self.branches:
            raise ConfigError(f"{len(limits)} code limits for {self.branches} branches")
        for p, branch in enumerate(self.codes):
            for i, grid in enumerate(branch):
                if int(grid.codes.max()) >= limits[p]:
                    raise CodeRangeError(
                        f"branch {p} step {i}: code {int(grid.codes.max())} out of range (limit {limits[p]})"
                    )

    def encode(self) -> bytes:
        name = self.variant.encode('ascii')
        parts = [
            STREAM_MAGIC,
            struct.pack('<BH', FORMAT_VERSION, len(name)),
            name,
            struct.pack('<HB', self.side, len(self.resolutions)),
            struct.pack(f'<{len(self.resolutions)}H', *self.resolutions),
            struct.pack('<BB', self.branches, self.active_steps),
        ]
        for branch in self.codes:
            for grid in branch:
                parts.append(grid.codes.astype('<u4').tobytes(order='C'))
        return b''.join(parts)

    @classmethod
    def decode(cls, data: bytes, limits: Optional[Sequence[int]] = None) -> 'CodeStream':
        """Parse an XQCS byte string; optional per-branch code limits are enforced."""
        reader = _Reader(data, 'stream')
        if reader.take(4, 'header') != STREAM_MAGIC:
            raise FormatError(f"magic mismatch: expected {STREAM_MAGIC!r}", 0)
        version = reader.uint('B', 'version')
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported stream version {version}", 4)
        name_length = reader.uint('H', 'variant length')
        name_at = reader.offset
        raw_name = reader.take(name_length, 'variant name')
        try:
            name = raw_name.decode('ascii')
            spec = parse_variant(name)
        except (UnicodeDecodeError, ValueError) as exc:
            raise FormatError(f"invalid variant name {raw_name!r}: {exc}", name_at)
        if format_variant(spec) != name:
            raise FormatError(f"variant name '{name}' is not canonical", name_at)

        side = reader.uint('H', 'grid side')
        steps_at = reader.offset
        steps = reader.uint('B', 'schedule length')
        if steps != spec.residual_steps:
            raise FormatError(f"schedule has {steps} steps, {name} has {spec.residual_steps}", steps_at)
        sched_at = reader.offset
        resolutions = tuple(int(s) for s in reader.array('<u2', steps, 'schedule'))
        branches_at = reader.offset
        branches = reader.uint('B', 'branch count')
        if branches != spec.product_branches:
            raise FormatError(f"stream has {branches} branches, {name} has {spec.product_branches}", branches_at)
        active_at = reader.offset
        active = reader.uint('B', 'active steps')
        if not 1 <= active <= steps:
            raise FormatError(f"active steps {active} outside [1, {steps}]", active_at)
        try:
            schedule = ScaleSchedule(resolutions)
            schedule.check_side(side)
        except ValueError as exc:
            raise FormatError(f"invalid schedule {resolutions}: {exc}", sched_at)
        if not spec.multiscale and any(s != side for s in resolutions):
            raise FormatError(f"single-scale stream with schedule {resolutions}", sched_at)

        codes = []
        for p in range(branches):
            branch = []
            for i in range(active):
                s = resolutions[i]
                block = reader.array('<u4', s * s, f"codes (branch {p}, step {i})")
                branch.append(CodeGrid(block.astype(np.uint32).reshape(s, s)))
            codes.append(branch)
        reader.finish()
        stream = cls(name, side, resolutions, codes)
        if limits is not None:
            stream.check_range(limits)
        return stream


def write_stream(path: str, stream: CodeStream) -> None:
    atomic_write(path, stream.encode())
    logger.debug("wrote %s stream, %d steps, to %s", stream.variant, stream.active_steps, path)


def read_stream(path: str, limits: Optional[Sequence[int]] = None) -> CodeStream:
    return CodeStream.decode(_read_file(path), limits)


def truncate_stream(stream: CodeStream, active_steps: int) -> CodeStream:
    """Keep only the first n residual steps (a lower-bitrate stream)."""
    if not 1 <= active_steps <= stream.active_steps:
        raise ConfigError(f"cannot truncate a {stream.active_steps}-step stream to {active_steps} steps")
    return CodeStream(stream.variant, stream.side, stream.resolutions,
                      [branch[:active_steps] for branch in stream.codes])


def payload_bits(resolutions: Sequence[int], branches: int, active_steps: int, bits_per_code: int) -> int:
    """P x sum_{i<n} s_i^2 x bits per code."""
    return branches * sum(int(s) * int(s) for s in resolutions[:active_steps]) * bits_per_code


def stream_bits(stream: CodeStream, spec: HierarchySpec) -> int:
    """
    Information bits of a stream's codes.

    VQ variants need spec.codebook_sizes; LFQ/BSQ variants need spec.dim.
    """
    if spec != stream.spec:
        raise ConfigError(f"spec {format_variant(spec)} does not match stream variant {stream.variant}")
    if spec.leaf.is_binary:
        per_branch = [code_bits(spec.leaf, spec.branch_dim)] * stream.branches
    else:
        if not spec.codebook_sizes:
            raise ConfigError("VQ bit accounting needs the codebook sizes")
        per_branch = [code_bits(spec.leaf, 0, j) for j in spec.codebook_sizes]
    return sum(payload_bits(stream.resolutions, 1, stream.active_steps, b) for b in per_branch)


# -- raw feature files -----------------------------------------------------------

def write_features(path: str, samples) -> None:
    """Write an (M, d) array as float32 plus its text header."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or min(samples.shape) < 1:
        raise ShapeMismatchError(f"features must be a non-empty (M, d) array, got shape {samples.shape}")
    header = f"count={samples.shape[0]}\ndim={samples.shape[1]}\n"
    atomic_write_all([
        (path, samples.astype('<f4').tobytes(order='C')),
        (path + HEADER_SUFFIX, header.encode('ascii')),
    ])


def _parse_header(text: str) -> Tuple[int, int]:
    values = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            key, sep, value = stripped.partition('=')
            if not sep or key.strip() not in ('count', 'dim') or not value.strip().isdigit():
                raise FormatError(f"malformed header line '{stripped}'", offset)
            values[key.strip()] = int(value)
        offset += len(line.encode('ascii', errors='replace'))
    if 'count' not in values or 'dim' not in values:
        raise FormatError("header needs count= and dim= lines", offset)
    if values['count'] < 1 or values['dim'] < 1:
        raise FormatError(f"header declares an empty array: {values}", 0)
    return values['count'], values['dim']


def read_features(path: str) -> np.ndarray:
    """Read a raw float32 feature file as an (M, d) float64 array."""
    count, dim = _parse_header(_read_file(path + HEADER_SUFFIX).decode('ascii', errors='replace'))
    reader = _Reader(_read_file(path), 'feature file')
    values = reader.array('<f4', count * dim, 'payload')
    reader.finish()
    samples = values.astype(np.float64).reshape(count, dim)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteError(f"{path} contains non-finite values")
    return samples
