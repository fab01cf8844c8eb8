"""
Residual quantization with quantizer dropout

r_1 = g; for each step i the leaf quantizes r_i to z'_i and the next
residual is r_{i+1} = r_i - z'_i. The output is the sum of the z'_i.
One codebook is shared by every step. In training mode a Bernoulli(p) draw
truncates the call to n steps, n uniform in [N_start, N].
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from config import DEFAULT_DROPOUT_RATIO, DEFAULT_DROPOUT_START
from core import CodeGrid, Codebook, ConfigError, FeatureGrid, Rng, ShapeMismatchError
from leaf_quantizers import LeafKind, leaf_lookup, leaf_quantize_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualConfig:
    """
    Residual quantizer configuration.

    Args:
        steps: number of residual steps N
        leaf: leaf quantizer kind
        codebook: codebook shared by all steps (VQ only)
        dropout_ratio: probability p that a training call is truncated
        dropout_start: smallest number of kept steps N_start (default min(3, N))
    """
    steps: int = 1
    leaf: LeafKind = LeafKind.VQ
    codebook: Optional[Codebook] = field(default=None, compare=False)
    dropout_ratio: float = DEFAULT_DROPOUT_RATIO
    dropout_start: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"residual steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.dropout_ratio <= 1.0:
            raise ConfigError(f"dropout ratio must lie in [0, 1], got {self.dropout_ratio}")
        if self.dropout_start is None:
            object.__setattr__(self, 'dropout_start', min(DEFAULT_DROPOUT_START, self.steps))
        if not 1 <= self.dropout_start <= self.steps:
            raise ConfigError(
                f"dropout start must lie in [1, {self.steps}], got {self.dropout_start}"
            )
        if (self.leaf is LeafKind.VQ) != (self.codebook is not None):
            raise ConfigError(f"{self.leaf.name} leaf: codebook must be given iff the leaf is VQ")


@dataclass
class ResidualTrace:
    """
    Per-step record of a residual encode.

    quantized[i] is the full-resolution contribution of step i, codes[i] the
    code grid at the step's native resolution and inputs[i] the leaf input
    (the residual, resampled for multi-scale steps).
    """
    quantized: List[FeatureGrid]
    codes: List[CodeGrid]
    inputs: List[FeatureGrid]
    residual_norms: List[float]
    sq_errors: List[float]
    final_residual: FeatureGrid
    configured_steps: int

    @property
    def active_steps(self) -> int:
        return len(self.quantized)


def draw_active_steps(cfg: ResidualConfig, training: bool = False, rng: Optional[Rng] = None) -> int:
    """
    Number of residual steps to run for one call.

    Inference always runs N steps. In training, with probability p the
    call keeps n steps, n uniform over {N_start, ..., N}.
    """
    if not training or cfg.dropout_ratio == 0.0:
        return cfg.steps
    if rng is None:
        raise ConfigError("training-mode dropout needs an Rng")
    if rng.bernoulli(cfg.dropout_ratio):
        return rng.integers(cfg.dropout_start, cfg.steps + 1)
    return cfg.steps


def _check_active(cfg: ResidualConfig, active_steps: int) -> None:
    if not 1 <= active_steps <= cfg.steps:
        raise ConfigError(f"active steps must lie in [1, {cfg.steps}], got {active_steps}")


def rq_encode(g: FeatureGrid, cfg: ResidualConfig, training: bool = False,
              rng: Optional[Rng] = None, active_steps: Optional[int] = None) -> ResidualTrace:
    """
    Residual-quantize a grid.

    Args:
        g: input grid
        cfg: residual configuration
        training: enables quantizer dropout
        rng: random stream for the dropout draw
        active_steps: force the number of steps (used to share one draw
            across product branches)

    Returns:
        ResidualTrace with n = active steps entries
    """
    if cfg.codebook is not None and cfg.codebook.dim != g.dim:
        raise ShapeMismatchError(
            f"codebook dimension {cfg.codebook.dim} does not match feature dimension {g.dim}"
        )
    n = draw_active_steps(cfg, training, rng) if active_steps is None else active_steps
    _check_active(cfg, n)

    residual = g
    trace = ResidualTrace([], [], [], [], [], g, cfg.steps)
    for i in range(n):
        quantized, codes, sq_error = leaf_quantize_grid(residual, cfg.leaf, cfg.codebook, allow_zero=i > 0)
        trace.inputs.append(residual)
        residual = FeatureGrid(residual.data - quantized.data)
        trace.quantized.append(quantized)
        trace.codes.append(codes)
        trace.sq_errors.append(sq_error)
        trace.residual_norms.append(float(np.linalg.norm(residual.data)))
    trace.final_residual = residual
    logger.debug("rq_encode: %d/%d steps, final residual norm %.6g",
                 n, cfg.steps, trace.residual_norms[-1])
    return trace


def sum_grids(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Left-to-right sum, starting from the first term."""
    total = np.array(grids[0], dtype=np.float64, copy=True)
    for term in grids[1:]:
        total = total + term
    return total


def rq_sum(t: ResidualTrace) -> FeatureGrid:
    """z' = sum of the per-step quantized grids."""
    if not t.quantized:
        raise ConfigError("cannot sum an empty residual trace")
    return FeatureGrid(sum_grids([q.data for q in t.quantized]))


def rq_decode(codes: Sequence[CodeGrid], cfg: ResidualConfig, dim: Optional[int] = None) -> FeatureGrid:
    """
    Reconstruct sum_i lookup(codes_i) from stored codes.

    Args:
        codes: per-step code grids (n <= N of them)
        cfg: residual configuration used to encode
        dim: vector dimension, required for LFQ/BSQ leaves
    """
    if not codes:
        raise ConfigError("no code grids to decode")
    if len(codes) > cfg.steps:
        raise ConfigError(f"{len(codes)} code grids for a {cfg.steps}-step quantizer")
    if cfg.leaf is LeafKind.VQ:
        dim = cfg.codebook.dim
    elif dim is None:
        raise ConfigError(f"{cfg.leaf.name} decode needs the vector dimension")
    shapes = {c.codes.shape for c in codes}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"residual code grids differ in shape: {sorted(shapes)}")
    terms = [leaf_lookup(c.codes, cfg.leaf, dim, cfg.codebook) for c in codes]
    return FeatureGrid(sum_grids(terms))
