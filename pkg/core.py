"""
Core containers for the XQ quantization toolkit

This module holds the numeric value types shared by every quantizer:
- FeatureGrid: a height x width grid of d-dimensional float64 vectors
- Codebook: an ordered J x d table of codewords
- CodeGrid: unsigned 32-bit code indices laid out on a grid
- Rng: a counter-based deterministic random stream
plus the error taxonomy raised throughout the package.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class XQError(ValueError):
    """Base class for every error raised by the toolkit."""


class ShapeMismatchError(XQError):
    """Grids, codebooks or code arrays have incompatible shapes."""


class NonFiniteError(XQError):
    """Input contains NaN or infinite values."""


class CodeRangeError(XQError):
    """A code index is outside the range of its codebook."""


class DegenerateInputError(XQError):
    """Input for which the quantizer is undefined (e.g. a zero vector for BSQ)."""


class ConfigError(XQError):
    """A quantizer configuration or codebook set is inconsistent."""


class VariantSyntaxError(XQError):
    """A variant name does not follow the XQ naming grammar."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class FormatError(XQError):
    """A serialized file is malformed or truncated."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """
    A grid of continuous feature vectors.

    The data is stored row-major as a (height, width, dim) float64 array and
    is read-only once the grid is constructed.
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order='C', copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatchError(
                f"FeatureGrid needs a non-empty (height, width, dim) array, got shape {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("FeatureGrid values must be finite")
        object.__setattr__(self, 'data', _frozen(data))

    @classmethod
    def from_array(cls, array, height: Optional[int] = None, width: Optional[int] = None) -> 'FeatureGrid':
        """
        Build a grid from a 3-D array, or from a flat/2-D array plus a shape.

        Args:
            array: (h, w, d) array, (h*w, d) array or flat array
            height: grid height when array is not 3-D
            width: grid width when array is not 3-D
        """
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 3:
            return cls(array)
        if height is None or width is None:
            raise ShapeMismatchError("height and width are required for non-3-D input")
        return cls(array.reshape(height, width, -1))

    @classmethod
    def zeros(cls, height: int, width: int, dim: int) -> 'FeatureGrid':
        return cls(np.zeros((height, width, dim)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def vectors(self) -> np.ndarray:
        """Return the (height*width, dim) row view of the grid."""
        return self.data.reshape(-1, self.dim)

    def same_bits(self, other: 'FeatureGrid') -> bool:
        """Bitwise equality, including signed zeros."""
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True, eq=False)
class Codebook:
    """An ordered table of J codewords in R^d."""
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64, order='C', copy=True)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise ShapeMismatchError(
                f"Codebook needs a (J, d) array with J >= 1 and d >= 1, got shape {entries.shape}"
            )
        if not np.all(np.isfinite(entries)):
            raise NonFiniteError("Codebook entries must be finite")
        object.__setattr__(self, 'entries', _frozen(entries))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.size and int(codes.max()) >= self.size:
            raise CodeRangeError(f"code {int(codes.max())} out of range for codebook of size {self.size}")
        return self.entries[codes.astype(np.intp)]


@dataclass(frozen=True, eq=False)
class CodeGrid:
    """Integer code indices for every position of a grid."""
    codes: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.codes)
        if raw.ndim != 2 or min(raw.shape) < 1:
            raise ShapeMismatchError(f"CodeGrid needs a non-empty 2-D array, got shape {raw.shape}")
        if raw.size and raw.dtype.kind in 'iu' and (raw.min() < 0 or raw.max() > 0xFFFFFFFF):
            raise CodeRangeError("codes must fit an unsigned 32-bit integer")
        codes = np.array(raw, dtype=np.uint32, order='C', copy=True)
        object.__setattr__(self, 'codes', _frozen(codes))

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodeGrid):
            return NotImplemented
        return self.codes.shape == other.codes.shape and bool(np.array_equal(self.codes, other.codes))

    def __hash__(self):
        return hash((self.codes.shape, self.codes.tobytes()))

    def check_range(self, limit: int) -> None:
        if int(self.codes.max()) >= limit:
            raise CodeRangeError(f"code {int(self.codes.max())} out of range (limit {limit})")


class Rng:
    """
    Counter-based deterministic random stream.

    The stream is numpy's Philox-4x64-10 bit generator keyed with the seed,
    counter starting at zero. Two Rng objects built from the same seed (and
    the same stream id) yield bit-identical sequences on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        # the stream id occupies the upper key word
        self._bitgen = np.random.Philox(key=self.seed + (self.stream << 64))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        words = self._bitgen.state['state']['counter']
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    def fork(self, stream: int) -> 'Rng':
        """Independent stream sharing this seed."""
        return Rng(self.seed, stream)

    def uniform(self) -> float:
        """A float in [0, 1)."""
        return float(self._gen.random())

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def choice(self, n: int, p: Optional[Sequence[float]] = None) -> int:
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_same_shape(a: FeatureGrid, b: FeatureGrid) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"grid shapes differ: {a.shape} vs {b.shape}")


def grid_subtract(a: FeatureGrid, b: FeatureGrid) -> FeatureGrid:
    """Elementwise a - b."""
    _check_same_shape(a, b)
    return FeatureGrid(a.data - b.data)


def grid_add(a: FeatureGrid, b: FeatureGrid) -> FeatureGrid:
    """Elementwise a + b."""
    _check_same_shape(a, b)
    return FeatureGrid(a.data + b.data)


def mse(a: FeatureGrid, b: FeatureGrid) -> float:
    """Mean of squared differences over all scalars."""
    _check_same_shape(a, b)
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def concat_channels(grids: Sequence[FeatureGrid]) -> FeatureGrid:
    """Channel-wise concatenation of grids with equal spatial shape."""
    if not grids:
        raise ShapeMismatchError("nothing to concatenate")
    spatial = {g.shape[:2] for g in grids}
    if len(spatial) != 1:
        raise ShapeMismatchError(f"spatial shapes differ: {sorted(spatial)}")
    return FeatureGrid(np.concatenate([g.data for g in grids], axis=2))
