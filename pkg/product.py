"""
Product quantization

The channel dimension is chunked into P contiguous sub-vectors; each branch
is quantized by its own residual quantizer and the branch outputs are
concatenated channel-wise. Branches are data independent and may be
evaluated on a thread pool; results are merged in branch order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core import ConfigError, FeatureGrid, Rng, ShapeMismatchError, concat_channels
from residual import ResidualConfig, ResidualTrace, draw_active_steps, rq_encode, rq_sum

logger = logging.getLogger(__name__)

BranchEncoder = Callable[[FeatureGrid, int, int], ResidualTrace]


@dataclass(frozen=True)
class ProductConfig:
    """
    Product quantizer configuration.

    Args:
        branch_dims: sub-dimension d_p of each branch (contiguous channels)
        branch_configs: residual quantizer of each branch (optional when a
            custom branch encoder is supplied)
    """
    branch_dims: Tuple[int, ...]
    branch_configs: Tuple[ResidualConfig, ...] = field(default=(), compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.branch_dims)
        if not dims or any(d < 1 for d in dims):
            raise ConfigError(f"branch dimensions must be positive, got {dims}")
        object.__setattr__(self, 'branch_dims', dims)
        configs = tuple(self.branch_configs)
        if configs and len(configs) != len(dims):
            raise ConfigError(f"{len(configs)} branch configs for {len(dims)} branches")
        object.__setattr__(self, 'branch_configs', configs)

    @classmethod
    def equal(cls, dim: int, branches: int,
              branch_configs: Sequence[ResidualConfig] = ()) -> 'ProductConfig':
        """Equal split; d must be divisible by P."""
        if branches < 1:
            raise ConfigError(f"product branches must be >= 1, got {branches}")
        if dim % branches:
            raise ConfigError(f"dimension {dim} is not divisible into {branches} equal branches")
        return cls((dim // branches,) * branches, tuple(branch_configs))

    @property
    def branches(self) -> int:
        return len(self.branch_dims)

    @property
    def dim(self) -> int:
        return sum(self.branch_dims)

    def offsets(self) -> List[int]:
        return [int(x) for x in np.cumsum((0,) + self.branch_dims)]


@dataclass
class ProductOutcome:
    """Concatenated output of all branches plus the per-branch traces."""
    quantized: FeatureGrid
    traces: List[ResidualTrace]
    sq_error: float
    active_steps: int


def pq_split(g: FeatureGrid, cfg: ProductConfig) -> List[FeatureGrid]:
    """Chunk channels into the configured sub-grids."""
    if g.dim != cfg.dim:
        raise ShapeMismatchError(f"grid dimension {g.dim} does not match product dimension {cfg.dim}")
    if cfg.branches == 1:
        return [g]
    bounds = cfg.offsets()
    return [FeatureGrid(g.data[:, :, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]


def pq_join(parts: Sequence[FeatureGrid]) -> FeatureGrid:
    """Inverse of pq_split."""
    if len(parts) == 1:
        return parts[0]
    return concat_channels(parts)


def pq_quantize(g: FeatureGrid, cfg: ProductConfig, training: bool = False,
                rng: Optional[Rng] = None, encode_branch: Optional[BranchEncoder] = None,
                order: Optional[Sequence[int]] = None,
                max_workers: Optional[int] = None) -> ProductOutcome:
    """
    Quantize each branch independently and concatenate.

    All branches share one dropout draw. The draw is taken from the first
    branch's residual configuration.

    Args:
        g: input grid
        cfg: product configuration
        training: enables quantizer dropout
        rng: random stream for the shared dropout draw
        encode_branch: callable (sub_grid, branch_index, active_steps) ->
            ResidualTrace; defaults to rq_encode with the branch config
        order: branch evaluation order (results never depend on it)
        max_workers: evaluate branches on a thread pool when > 1

    Returns:
        ProductOutcome
    """
    parts = pq_split(g, cfg)
    if encode_branch is None:
        if not cfg.branch_configs:
            raise ConfigError("pq_quantize needs branch configs or a branch encoder")

        def encode_branch(sub, p, n):
            return rq_encode(sub, cfg.branch_configs[p], active_steps=n)

    if cfg.branch_configs:
        n = draw_active_steps(cfg.branch_configs[0], training, rng)
    elif training:
        raise ConfigError("training-mode dropout needs branch configs")
    else:
        n = None

    order = list(range(cfg.branches)) if order is None else list(order)
    if sorted(order) != list(range(cfg.branches)):
        raise ConfigError(f"evaluation order {order} is not a permutation of the branches")

    traces: List[Optional[ResidualTrace]] = [None] * cfg.branches
    if max_workers and max_workers > 1 and cfg.branches > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {p: pool.submit(encode_branch, parts[p], p, n) for p in order}
            for p in order:
                traces[p] = futures[p].result()
    else:
        for p in order:
            traces[p] = encode_branch(parts[p], p, n)

    quantized = pq_join([rq_sum(t) for t in traces])
    sq_error = sum(float(np.sum(t.final_residual.data ** 2)) for t in traces)
    logger.debug("pq_quantize: %d branches, %d active steps", cfg.branches, traces[0].active_steps)
    return ProductOutcome(quantized, traces, sq_error, traces[0].active_steps)
