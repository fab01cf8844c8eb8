"""
Multi-scale residual quantization

Step i downsamples the residual to s_i x s_i, quantizes it, upsamples the
result back to K x K and blends it with a fixed filter:

    z_hat_i = gamma * conv(up_i) + (1 - gamma) * up_i

before subtracting it from the residual. Codes are kept at the step's
native resolution. Resampling is bilinear with align_corners=False in both
directions. conv is a cross-correlation as in convolution layers (the kernel
is not flipped) and zero-pads its borders.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from config import DEFAULT_BLEND_GAMMA, DEFAULT_BLEND_KERNEL_SIZE, SCHEDULE_PRESETS
from core import CodeGrid, ConfigError, FeatureGrid, Rng, ShapeMismatchError
from leaf_quantizers import LeafKind, leaf_lookup, leaf_quantize_grid
from residual import ResidualConfig, ResidualTrace, draw_active_steps, sum_grids

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleSchedule:
    """Non-decreasing per-step grid sides; the last one is the full side K."""
    resolutions: Tuple[int, ...]

    def __post_init__(self):
        sides = tuple(int(s) for s in self.resolutions)
        if not sides:
            raise ConfigError("scale schedule must have at least one step")
        if any(s < 1 for s in sides):
            raise ConfigError(f"scale schedule sides must be positive, got {sides}")
        if any(b < a for a, b in zip(sides, sides[1:])):
            raise ConfigError(f"scale schedule must be non-decreasing, got {sides}")
        object.__setattr__(self, 'resolutions', sides)

    @classmethod
    def full(cls, side: int, steps: int) -> 'ScaleSchedule':
        """Every step at full resolution (plain RQ)."""
        return cls((side,) * steps)

    @property
    def side(self) -> int:
        return self.resolutions[-1]

    @property
    def steps(self) -> int:
        return len(self.resolutions)

    def check_side(self, side: int) -> None:
        if self.side != side:
            raise ShapeMismatchError(f"schedule ends at side {self.side}, grid side is {side}")


def default_schedule(side: int, steps: int) -> ScaleSchedule:
    """Evenly spaced sides ceil(K * i / N), i = 1..N."""
    if side < 1 or steps < 1:
        raise ConfigError(f"invalid side/steps for a schedule: {side}, {steps}")
    return ScaleSchedule(tuple(max(1, -(-side * (i + 1) // steps)) for i in range(steps)))


def parse_schedule(text: str, presets: Optional[dict] = None) -> ScaleSchedule:
    """Parse '1,2,4' or a preset name such as 'var'."""
    presets = SCHEDULE_PRESETS if presets is None else presets
    key = text.strip().lower()
    if key in presets:
        return ScaleSchedule(tuple(presets[key]))
    try:
        return ScaleSchedule(tuple(int(s) for s in key.split(',') if s.strip()))
    except ValueError:
        raise ConfigError(f"invalid schedule '{text}': use comma-separated integers or a preset")


def token_count(schedule: ScaleSchedule, branches: int, active_steps: Optional[int] = None) -> int:
    """branches x sum of s_i^2 over the (first n) steps."""
    if branches < 1:
        raise ConfigError(f"branches must be >= 1, got {branches}")
    sides = schedule.resolutions if active_steps is None else schedule.resolutions[:active_steps]
    return branches * sum(s * s for s in sides)


@dataclass(frozen=True, eq=False)
class BlendFilter:
    """gamma and a fixed odd-sized square kernel for the post-upsampling blend."""
    gamma: float
    kernel: np.ndarray

    def __post_init__(self):
        kernel = np.array(self.kernel, dtype=np.float64, copy=True)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ConfigError(f"blend kernel must be square with odd side, got shape {kernel.shape}")
        if not np.all(np.isfinite(kernel)):
            raise ConfigError("blend kernel weights must be finite")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"blend gamma must lie in [0, 1], got {self.gamma}")
        kernel.flags.writeable = False
        object.__setattr__(self, 'kernel', kernel)

    @classmethod
    def box(cls, size: int = DEFAULT_BLEND_KERNEL_SIZE, gamma: float = DEFAULT_BLEND_GAMMA) -> 'BlendFilter':
        return cls(gamma, np.full((size, size), 1.0 / (size * size)))


BlendSpec = Union[BlendFilter, Sequence[BlendFilter], None]


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights, half-pixel centers, edges clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(weights, (rows, i0), 1.0 - lam)
    np.add.at(weights, (rows, i1), lam)
    return weights


def resample(g: FeatureGrid, target_side: int) -> FeatureGrid:
    """
    Bilinear resize of every channel to target_side x target_side.

    A grid that already has the target size is returned unchanged.
    """
    if target_side < 1:
        raise ConfigError(f"target side must be >= 1, got {target_side}")
    if g.height == target_side and g.width == target_side:
        return g
    rows = _interp_matrix(g.height, target_side)
    cols = _interp_matrix(g.width, target_side)
    tmp = np.tensordot(rows, g.data, axes=(1, 0))           # (T, W, C)
    out = np.tensordot(cols, tmp, axes=(1, 1))              # (T_w, T_h, C)
    return FeatureGrid(np.transpose(out, (1, 0, 2)))


def blend(g: FeatureGrid, f: BlendFilter) -> FeatureGrid:
    """
    gamma * conv(g) + (1 - gamma) * g, per channel.

    conv is a zero-padded cross-correlation: out[i, j] sums
    kernel[a, b] * g[i + a - c, j + b - c] with c the kernel center, so an
    asymmetric kernel is applied unflipped.
    """
    if f.gamma == 0.0:
        return g
    conv = ndimage.correlate(g.data, f.kernel[:, :, None], mode='constant', cval=0.0)
    if f.gamma == 1.0:
        return FeatureGrid(conv)
    return FeatureGrid(f.gamma * conv + (1.0 - f.gamma) * g.data)


def _filters(blend_filter: BlendSpec, steps: int) -> List[BlendFilter]:
    if blend_filter is None:
        return [BlendFilter.box()] * steps
    if isinstance(blend_filter, BlendFilter):
        return [blend_filter] * steps
    filters = list(blend_filter)
    if len(filters) != steps:
        raise ConfigError(f"{len(filters)} blend filters for {steps} steps")
    return filters


def _check_grid(g: FeatureGrid, schedule: ScaleSchedule, cfg: ResidualConfig) -> None:
    if g.height != g.width:
        raise ShapeMismatchError(f"multi-scale quantization needs a square grid, got {g.height}x{g.width}")
    schedule.check_side(g.height)
    if schedule.steps != cfg.steps:
        raise ConfigError(f"schedule has {schedule.steps} steps, residual config has {cfg.steps}")
    if cfg.codebook is not None and cfg.codebook.dim != g.dim:
        raise ShapeMismatchError(
            f"codebook dimension {cfg.codebook.dim} does not match feature dimension {g.dim}"
        )


def msrq_encode(g: FeatureGrid, schedule: ScaleSchedule, cfg: ResidualConfig,
                blend_filter: BlendSpec = None, training: bool = False,
                rng: Optional[Rng] = None, active_steps: Optional[int] = None) -> ResidualTrace:
    """
    Multi-scale residual encode.

    Args:
        g: square K x K input grid
        schedule: per-step sides ending at K
        cfg: residual configuration (steps must equal the schedule length)
        blend_filter: one filter for all steps, one per step, or None for
            the default box filter
        training: enables quantizer dropout
        rng: random stream for the dropout draw
        active_steps: force the number of steps

    Returns:
        ResidualTrace with codes at s_i x s_i and full-resolution z_hat_i
    """
    _check_grid(g, schedule, cfg)
    filters = _filters(blend_filter, schedule.steps)
    n = draw_active_steps(cfg, training, rng) if active_steps is None else active_steps
    if not 1 <= n <= cfg.steps:
        raise ConfigError(f"active steps must lie in [1, {cfg.steps}], got {n}")

    side = g.height
    residual = g
    trace = ResidualTrace([], [], [], [], [], g, cfg.steps)
    for i in range(n):
        down = resample(residual, schedule.resolutions[i])
        quantized, codes, sq_error = leaf_quantize_grid(down, cfg.leaf, cfg.codebook, allow_zero=i > 0)
        z_hat = blend(resample(quantized, side), filters[i])
        residual = FeatureGrid(residual.data - z_hat.data)
        trace.inputs.append(down)
        trace.quantized.append(z_hat)
        trace.codes.append(codes)
        trace.sq_errors.append(sq_error)
        trace.residual_norms.append(float(np.linalg.norm(residual.data)))
    trace.final_residual = residual
    logger.debug("msrq_encode: %d/%d steps, schedule %s", n, cfg.steps, schedule.resolutions)
    return trace


def msrq_decode(codes: Sequence[CodeGrid], schedule: ScaleSchedule, cfg: ResidualConfig,
                blend_filter: BlendSpec = None, dim: Optional[int] = None) -> FeatureGrid:
    """Full-resolution reconstruction from per-scale code grids."""
    if not codes:
        raise ConfigError("no code grids to decode")
    if len(codes) > schedule.steps:
        raise ConfigError(f"{len(codes)} code grids for a {schedule.steps}-step schedule")
    filters = _filters(blend_filter, schedule.steps)
    if cfg.leaf is LeafKind.VQ:
        dim = cfg.codebook.dim
    elif dim is None:
        raise ConfigError(f"{cfg.leaf.name} decode needs the vector dimension")
    terms = []
    for i, code_grid in enumerate(codes):
        s = schedule.resolutions[i]
        if code_grid.codes.shape != (s, s):
            raise ShapeMismatchError(
                f"step {i} codes have shape {code_grid.codes.shape}, schedule expects {s}x{s}"
            )
        quantized = FeatureGrid(leaf_lookup(code_grid.codes, cfg.leaf, dim, cfg.codebook))
        terms.append(blend(resample(quantized, schedule.side), filters[i]).data)
    return FeatureGrid(sum_grids(terms))
