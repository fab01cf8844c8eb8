"""
Leaf quantizers: VQ, LFQ and BSQ

Each leaf maps one d-dimensional vector to an integer code and a quantized
vector z':
- VQ: nearest codeword of a learned codebook (lowest index wins ties)
- LFQ: per-dimension sign, code = sign bit pattern (dimension 0 is the LSB)
- BSQ: LFQ on the L2-normalized vector, scaled onto the unit sphere

The grid functions run the same vectorized kernels as the single-vector
functions, so a grid result is bitwise equal to a position-by-position loop.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from config import KMEANS_CONFIG, MAX_BINARY_DIM
from core import (
    CodeGrid,
    CodeRangeError,
    Codebook,
    ConfigError,
    DegenerateInputError,
    FeatureGrid,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

_POW2 = np.left_shift(np.uint64(1), np.arange(MAX_BINARY_DIM, dtype=np.uint64))


class LeafKind(Enum):
    """Leaf quantizer kind; the value is its letter in a variant name."""
    VQ = "V"
    LFQ = "L"
    BSQ = "B"

    @property
    def is_binary(self) -> bool:
        return self is not LeafKind.VQ


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    """Result of quantizing a single vector."""
    code: int
    vector: np.ndarray
    sq_error: float


def check_binary_dim(dim: int) -> None:
    if not 1 <= dim <= MAX_BINARY_DIM:
        raise ConfigError(f"LFQ/BSQ need 1 <= d <= {MAX_BINARY_DIM}, got d={dim}")


def code_limit(kind: LeafKind, dim: int, codebook: Optional[Codebook] = None) -> int:
    """Number of distinct codes a leaf can emit."""
    if kind is LeafKind.VQ:
        if codebook is None:
            raise ConfigError("VQ leaf requires a codebook")
        return codebook.size
    check_binary_dim(dim)
    return 1 << dim


def code_bits(kind: LeafKind, dim: int, codebook_size: Optional[int] = None) -> int:
    """Information bits per code: ceil(log2 J) for VQ, d for LFQ/BSQ."""
    if kind is LeafKind.VQ:
        if not codebook_size or codebook_size < 1:
            raise ConfigError("VQ bit accounting needs a codebook size J >= 1")
        return (codebook_size - 1).bit_length()
    check_binary_dim(dim)
    return dim


def nearest_codewords(vectors: np.ndarray, entries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Brute-force nearest codeword search.

    Distances are computed as sum((x - e)^2) in blocks of rows; argmin
    returns the first minimum, so ties go to the lowest index.

    Args:
        vectors: (M, d) float64 array
        entries: (J, d) float64 array

    Returns:
        (codes, squared distances) arrays of length M
    """
    m = vectors.shape[0]
    j, d = entries.shape
    block = max(1, KMEANS_CONFIG['chunk_elements'] // max(1, j * d))
    codes = np.empty(m, dtype=np.int64)
    best = np.empty(m, dtype=np.float64)
    for start in range(0, m, block):
        diff = vectors[start:start + block, None, :] - entries[None, :, :]
        dist = np.sum(diff * diff, axis=2)
        idx = np.argmin(dist, axis=1)
        codes[start:start + block] = idx
        best[start:start + block] = dist[np.arange(idx.shape[0]), idx]
    return codes, best


def _sign_bits(vectors: np.ndarray) -> np.ndarray:
    # sign(0) = +1
    return vectors >= 0


def _bits_to_codes(bits: np.ndarray) -> np.ndarray:
    d = bits.shape[-1]
    return np.sum(bits.astype(np.uint64) * _POW2[:d], axis=-1).astype(np.uint32)


def _codes_to_bits(codes: np.ndarray, dim: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    return (codes[..., None] & _POW2[:dim]) != 0


def _binary_vectors(bits: np.ndarray, kind: LeafKind) -> np.ndarray:
    if kind is LeafKind.LFQ:
        return np.where(bits, 1.0, -1.0)
    scale = 1.0 / np.sqrt(bits.shape[-1])
    return np.where(bits, scale, -scale)


def _quantize_rows(vectors: np.ndarray, kind: LeafKind, codebook: Optional[Codebook],
                   allow_zero: bool = False):
    """Quantize (M, d) rows; returns (codes, quantized rows, per-row squared errors)."""
    if kind is LeafKind.VQ:
        codes, sq = nearest_codewords(vectors, codebook.entries)
        return codes.astype(np.uint32), codebook.entries[codes], sq
    check_binary_dim(vectors.shape[1])
    if kind is LeafKind.BSQ and not allow_zero:
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError("BSQ is undefined for the zero vector")
    # sign(z / |z|) = sign(z) for |z| > 0, taken from z to stay scale invariant;
    # an allowed zero row gets the all +1 code
    bits = _sign_bits(vectors)
    quantized = _binary_vectors(bits, kind)
    diff = vectors - quantized
    return _bits_to_codes(bits), quantized, np.sum(diff * diff, axis=1)


def _check_vector(z, dim: Optional[int] = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise ShapeMismatchError(f"expected a non-empty 1-D vector, got shape {z.shape}")
    if dim is not None and z.size != dim:
        raise ShapeMismatchError(f"vector has dimension {z.size}, codebook has dimension {dim}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("input vector must be finite")
    return z


def _single(z: np.ndarray, kind: LeafKind, codebook: Optional[Codebook]) -> QuantizedVector:
    codes, quantized, sq = _quantize_rows(z[None, :], kind, codebook)
    vector = quantized[0].copy()
    vector.flags.writeable = False
    return QuantizedVector(code=int(codes[0]), vector=vector, sq_error=float(sq[0]))


def vq_quantize(z, cb: Codebook) -> QuantizedVector:
    """Map z to its closest codeword (lowest index on ties)."""
    z = _check_vector(z, cb.dim)
    return _single(z, LeafKind.VQ, cb)


def lfq_quantize(z) -> QuantizedVector:
    """Lookup-free quantization of z onto {-1, +1}^d."""
    z = _check_vector(z)
    check_binary_dim(z.size)
    return _single(z, LeafKind.LFQ, None)


def bsq_quantize(z) -> QuantizedVector:
    """
    Binary spherical quantization.

    z is L2-normalized and mapped to sign(u) / sqrt(d), a point on the unit
    sphere. The zero vector is rejected with DegenerateInputError.
    """
    z = _check_vector(z)
    check_binary_dim(z.size)
    return _single(z, LeafKind.BSQ, None)


def _check_leaf_args(kind: LeafKind, dim: int, cb: Optional[Codebook]) -> None:
    if kind is LeafKind.VQ:
        if cb is None:
            raise ConfigError("VQ leaf requires a codebook")
        if cb.dim != dim:
            raise ShapeMismatchError(f"codebook dimension {cb.dim} does not match feature dimension {dim}")
    else:
        if cb is not None:
            raise ConfigError(f"{kind.name} leaf takes no codebook")
        check_binary_dim(dim)


def leaf_quantize_grid(g: FeatureGrid, kind: LeafKind, cb: Optional[Codebook] = None,
                       allow_zero: bool = False) -> Tuple[FeatureGrid, CodeGrid, float]:
    """
    Apply a leaf quantizer at every grid position.

    Args:
        allow_zero: BSQ only; map an all-zero vector to the sign(0) = +1 code
            (2^d - 1) instead of raising DegenerateInputError. Residual
            quantizers set it after their first step, where an input that
            equals a codeword exactly leaves a zero residual.

    Returns:
        (quantized grid, code grid, total squared error)
    """
    _check_leaf_args(kind, g.dim, cb)
    codes, quantized, sq = _quantize_rows(g.vectors(), kind, cb, allow_zero)
    return (
        FeatureGrid(quantized.reshape(g.shape)),
        CodeGrid(codes.reshape(g.height, g.width)),
        float(np.sum(sq)),
    )


def leaf_lookup(codes, kind: LeafKind, dim: int, cb: Optional[Codebook] = None) -> np.ndarray:
    """
    Decoder-side code -> vector mapping.

    Produces exactly the vectors the encoder emitted for the same codes.

    Returns:
        array of shape codes.shape + (dim,)
    """
    _check_leaf_args(kind, dim, cb)
    codes = np.asarray(codes)
    if kind is LeafKind.VQ:
        return cb.lookup(codes)
    limit = 1 << dim
    if codes.size and int(codes.max()) >= limit:
        raise CodeRangeError(f"code {int(codes.max())} out of range for {kind.name} with d={dim}")
    return _binary_vectors(_codes_to_bits(codes, dim), kind)


def sign_codebook(dim: int, descending: bool = False) -> Codebook:
    """
    Explicit {-1, +1}^d table of the LFQ code space.

    Row j holds the sign pattern of code j. With descending=True row j holds
    code 2^d - 1 - j, so that the lowest-index tie-break of VQ picks +1 for
    zero components, matching sign(0) = +1.
    """
    check_binary_dim(dim)
    if dim > 16:
        raise ConfigError(f"explicit sign codebook for d={dim} is too large")
    codes = np.arange(1 << dim, dtype=np.uint64)
    if descending:
        codes = codes[::-1]
    return Codebook(_binary_vectors(_codes_to_bits(codes, dim), LeafKind.LFQ))
