"""
Hierarchical quantizer composition

A hierarchy is P product branches, each a residual quantizer of N steps over
one leaf kind, optionally multi-scale. Variants are named with the grammar

    XQ[-MS]-{V|L|B}[-R<N>][-P<P>]

e.g. XQ-V (plain VQ), XQ-MS-V-R10-P2, XQ-MS-B-R10-P2. Canonical names omit
R1 and P1.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DEFAULT_COMMITMENT_BETA, DEFAULT_DROPOUT_RATIO
from core import (
    CodeGrid,
    Codebook,
    ConfigError,
    FeatureGrid,
    Rng,
    ShapeMismatchError,
    VariantSyntaxError,
    concat_channels,
    mse,
)
from leaf_quantizers import LeafKind, check_binary_dim, code_bits
from multiscale import BlendSpec, ScaleSchedule, default_schedule, msrq_decode, msrq_encode, resample, token_count
from product import ProductConfig, pq_join, pq_quantize, pq_split
from residual import ResidualConfig, ResidualTrace, rq_decode, rq_encode, sum_grids
from training import LossWeights, composite_loss, entropy_aux, vq_loss

logger = logging.getLogger(__name__)

# steps and branches are stored as u8 in code streams
MAX_STEPS = 255
MAX_BRANCHES = 255

_LEAF_LETTERS = {kind.value: kind for kind in LeafKind}


@dataclass(frozen=True)
class HierarchySpec:
    """
    Full quantizer configuration.

    Only the four grammar fields take part in equality; the runtime fields
    (dimension, codebook sizes, schedule, dropout, beta) are carried along
    for encoding but are not part of the variant name.
    """
    multiscale: bool = False
    leaf: LeafKind = LeafKind.VQ
    residual_steps: int = 1
    product_branches: int = 1
    dim: Optional[int] = field(default=None, compare=False)
    codebook_sizes: Tuple[int, ...] = field(default=(), compare=False)
    schedule: Optional[ScaleSchedule] = field(default=None, compare=False)
    dropout_ratio: float = field(default=DEFAULT_DROPOUT_RATIO, compare=False)
    dropout_start: Optional[int] = field(default=None, compare=False)
    beta: float = field(default=DEFAULT_COMMITMENT_BETA, compare=False)

    def __post_init__(self):
        if not 1 <= self.residual_steps <= MAX_STEPS:
            raise ConfigError(f"residual steps must lie in [1, {MAX_STEPS}], got {self.residual_steps}")
        if not 1 <= self.product_branches <= MAX_BRANCHES:
            raise ConfigError(f"product branches must lie in [1, {MAX_BRANCHES}], got {self.product_branches}")
        if self.dim is not None:
            if self.dim < 1 or self.dim % self.product_branches:
                raise ConfigError(
                    f"dimension {self.dim} is not divisible into {self.product_branches} equal branches"
                )
            if self.leaf.is_binary:
                check_binary_dim(self.branch_dim)
        sizes = tuple(int(j) for j in self.codebook_sizes)
        object.__setattr__(self, 'codebook_sizes', sizes)
        if sizes:
            if self.leaf.is_binary:
                raise ConfigError(f"{self.leaf.name} leaf takes no codebook sizes")
            if len(sizes) != self.product_branches:
                raise ConfigError(f"{len(sizes)} codebook sizes for {self.product_branches} branches")
            if any(j < 1 for j in sizes):
                raise ConfigError(f"VQ codebook size must be >= 1, got {sizes}")
        if self.schedule is not None:
            if not self.multiscale:
                raise ConfigError("a scale schedule needs a multi-scale (MS) variant")
            if self.schedule.steps != self.residual_steps:
                raise ConfigError(
                    f"schedule has {self.schedule.steps} steps, variant has R{self.residual_steps}"
                )
        if not 0.0 <= self.dropout_ratio <= 1.0:
            raise ConfigError(f"dropout ratio must lie in [0, 1], got {self.dropout_ratio}")
        if self.dropout_start is not None and not 1 <= self.dropout_start <= self.residual_steps:
            raise ConfigError(
                f"dropout start must lie in [1, {self.residual_steps}], got {self.dropout_start}"
            )
        if self.beta < 0 or not np.isfinite(self.beta):
            raise ConfigError(f"commitment beta must be finite and >= 0, got {self.beta}")

    @property
    def name(self) -> str:
        return format_variant(self)

    @property
    def branch_dim(self) -> int:
        if self.dim is None:
            raise ConfigError("spec has no feature dimension")
        return self.dim // self.product_branches

    def with_runtime(self, **kwargs) -> 'HierarchySpec':
        """Copy with runtime fields filled in (validated again)."""
        return replace(self, **kwargs)

    def resolve_schedule(self, side: int) -> ScaleSchedule:
        """The per-step sides used for a grid of side K."""
        if not self.multiscale:
            return ScaleSchedule.full(side, self.residual_steps)
        if self.schedule is not None:
            self.schedule.check_side(side)
            return self.schedule
        return default_schedule(side, self.residual_steps)

    def _residual_config(self, codebook: Optional[Codebook]) -> ResidualConfig:
        return ResidualConfig(
            steps=self.residual_steps,
            leaf=self.leaf,
            codebook=codebook,
            dropout_ratio=self.dropout_ratio,
            dropout_start=self.dropout_start,
        )


def parse_variant(name: str) -> HierarchySpec:
    """
    Parse a variant name into a spec.

    Raises:
        VariantSyntaxError: with the character position of the first
            offending token
    """
    if not isinstance(name, str):
        raise VariantSyntaxError("variant name must be text", 0)
    tokens = []
    pos = 0
    for part in name.split('-'):
        tokens.append((part, pos))
        pos += len(part) + 1

    if tokens[0][0] != 'XQ':
        raise VariantSyntaxError(f"variant must start with 'XQ', got '{tokens[0][0]}'", 0)
    i = 1
    multiscale = False
    if i < len(tokens) and tokens[i][0] == 'MS':
        multiscale = True
        i += 1
    if i >= len(tokens):
        raise VariantSyntaxError("missing leaf letter V, L or B", len(name))
    letter, at = tokens[i]
    if letter not in _LEAF_LETTERS:
        raise VariantSyntaxError(f"expected leaf letter V, L or B, got '{letter}'", at)
    leaf = _LEAF_LETTERS[letter]
    i += 1

    counts = {'R': 1, 'P': 1}
    for prefix in ('R', 'P'):
        if i < len(tokens) and tokens[i][0][:1] == prefix:
            text, at = tokens[i]
            counts[prefix] = _parse_count(text, at, MAX_STEPS if prefix == 'R' else MAX_BRANCHES)
            i += 1
    if i < len(tokens):
        text, at = tokens[i]
        raise VariantSyntaxError(f"unexpected token '{text}'", at)
    return HierarchySpec(multiscale=multiscale, leaf=leaf,
                         residual_steps=counts['R'], product_branches=counts['P'])


def _parse_count(text: str, at: int, limit: int) -> int:
    digits = text[1:]
    if not digits.isdigit() or not digits.isascii():
        raise VariantSyntaxError(f"'{text[0]}' must be followed by a positive integer, got '{text}'", at + 1)
    if digits[0] == '0':
        raise VariantSyntaxError(f"count in '{text}' must be a positive integer without leading zeros", at + 1)
    value = int(digits)
    if value > limit:
        raise VariantSyntaxError(f"count {value} in '{text}' exceeds {limit}", at + 1)
    return value


def format_variant(spec: HierarchySpec) -> str:
    """Canonical name; R1 and P1 are omitted."""
    parts = ['XQ']
    if spec.multiscale:
        parts.append('MS')
    parts.append(spec.leaf.value)
    if spec.residual_steps > 1:
        parts.append(f"R{spec.residual_steps}")
    if spec.product_branches > 1:
        parts.append(f"P{spec.product_branches}")
    return '-'.join(parts)


@dataclass
class QuantOutcome:
    """
    Result of a hierarchical encode.

    codes[p][i] is the code grid of branch p at step i; step_errors[i] is the
    mse between the input and the reconstruction after i + 1 steps.
    """
    quantized: FeatureGrid
    codes: List[List[CodeGrid]]
    losses: Dict[str, float]
    traces: List[ResidualTrace]
    total_bits: int
    active_steps: int
    step_errors: List[float]
    tokens: int
    schedule: Optional[ScaleSchedule] = None


def _check_codebooks(spec: HierarchySpec, codebooks: Optional[Sequence[Codebook]],
                     branch_dim: int) -> List[Optional[Codebook]]:
    P = spec.product_branches
    if spec.leaf.is_binary:
        if codebooks:
            raise ConfigError(f"{spec.leaf.name} leaf takes no codebooks")
        check_binary_dim(branch_dim)
        return [None] * P
    codebooks = list(codebooks or ())
    if len(codebooks) != P:
        raise ConfigError(f"{spec.name} needs {P} codebook(s), got {len(codebooks)}")
    for p, cb in enumerate(codebooks):
        if cb.dim != branch_dim:
            raise ShapeMismatchError(
                f"codebook {p} has dimension {cb.dim}, branch {p} has dimension {branch_dim}"
            )
        if spec.codebook_sizes and cb.size != spec.codebook_sizes[p]:
            raise ConfigError(f"codebook {p} has {cb.size} entries, spec expects {spec.codebook_sizes[p]}")
    return codebooks


def _branch_setup(g_dim: int, spec: HierarchySpec, codebooks):
    if spec.dim is not None and spec.dim != g_dim:
        raise ShapeMismatchError(f"grid dimension {g_dim} does not match spec dimension {spec.dim}")
    pcfg = ProductConfig.equal(g_dim, spec.product_branches)
    books = _check_codebooks(spec, codebooks, pcfg.branch_dims[0])
    cfgs = [spec._residual_config(cb) for cb in books]
    return ProductConfig(pcfg.branch_dims, tuple(cfgs)), cfgs


def _schedule_for(g: FeatureGrid, spec: HierarchySpec) -> Optional[ScaleSchedule]:
    """Schedule of a grid; single-scale grids that are not square have none."""
    if g.height != g.width:
        if spec.multiscale:
            raise ShapeMismatchError(f"multi-scale variants need a square grid, got {g.height}x{g.width}")
        return None
    return spec.resolve_schedule(g.height)


def _branch_encoder(spec: HierarchySpec, cfgs, schedule, blend_filter, forced):
    def encode(sub, p, n):
        n = n if forced is None else forced
        if spec.multiscale:
            return msrq_encode(sub, schedule, cfgs[p], blend_filter, active_steps=n)
        return rq_encode(sub, cfgs[p], active_steps=n)
    return encode


def _codes_per_branch(g: FeatureGrid, schedule: Optional[ScaleSchedule], n: int) -> int:
    if schedule is None:
        return n * g.height * g.width
    return token_count(schedule, 1, n)


def _bits(spec: HierarchySpec, cfgs, branch_dim: int, codes_per_branch: int) -> int:
    total = 0
    for cfg in cfgs:
        per_code = code_bits(spec.leaf, branch_dim, cfg.codebook.size if cfg.codebook else None)
        total += codes_per_branch * per_code
    return total


def hier_encode(g: FeatureGrid, spec: HierarchySpec, codebooks: Optional[Sequence[Codebook]] = None,
                training: bool = False, rng: Optional[Rng] = None, blend_filter: BlendSpec = None,
                max_workers: Optional[int] = None, active_steps: Optional[int] = None,
                loss_weights: Optional[LossWeights] = None) -> QuantOutcome:
    """
    Encode a grid with a hierarchical quantizer.

    The channels are split into P branches; every branch runs the (multi-scale)
    residual quantizer with the spec's leaf and its own codebook. All branches
    share one dropout draw.

    Args:
        g: input grid (square for multi-scale variants)
        spec: hierarchy configuration
        codebooks: one codebook per branch for VQ leaves, None for LFQ/BSQ
        training: enables quantizer dropout
        rng: random stream for the dropout draw
        blend_filter: multi-scale blend filter(s)
        max_workers: evaluate branches on a thread pool
        active_steps: force the number of residual steps
        loss_weights: weights of the reported composite loss

    Returns:
        QuantOutcome
    """
    pcfg, cfgs = _branch_setup(g.dim, spec, codebooks)
    schedule = _schedule_for(g, spec)
    if active_steps is not None and not 1 <= active_steps <= spec.residual_steps:
        raise ConfigError(f"active steps must lie in [1, {spec.residual_steps}], got {active_steps}")

    encoder = _branch_encoder(spec, cfgs, schedule, blend_filter, active_steps)
    outcome = pq_quantize(g, pcfg, training=training and active_steps is None, rng=rng,
                          encode_branch=encoder, max_workers=max_workers)
    traces = outcome.traces
    n = outcome.active_steps

    step_errors = []
    partial = [None] * len(traces)
    for i in range(n):
        for p, t in enumerate(traces):
            partial[p] = t.quantized[0].data if i == 0 else sum_grids([partial[p], t.quantized[i].data])
        step_errors.append(mse(g, pq_join([FeatureGrid(x) for x in partial])))

    weights = loss_weights or LossWeights()
    recon = mse(g, outcome.quantized)
    vq = vq_loss(g, outcome.quantized, spec.beta)
    aux = 0.0
    if spec.leaf.is_binary:
        aux = entropy_aux(concat_channels([t.inputs[0] for t in traces]))
    losses = {
        'recon': recon,
        'vq': vq,
        'aux': aux,
        'total': composite_loss(recon, vq, aux, weights),
    }
    per_branch = _codes_per_branch(g, schedule, n)
    bits = _bits(spec, cfgs, pcfg.branch_dims[0], per_branch)
    logger.debug("hier_encode %s: %d steps, %d bits, recon %.6g", spec.name, n, bits, recon)
    return QuantOutcome(
        quantized=outcome.quantized,
        codes=[list(t.codes) for t in traces],
        losses=losses,
        traces=traces,
        total_bits=bits,
        active_steps=n,
        step_errors=step_errors,
        tokens=per_branch * pcfg.branches,
        schedule=schedule,
    )


def hier_decode(codes: Sequence[Sequence[CodeGrid]], spec: HierarchySpec,
                codebooks: Optional[Sequence[Codebook]] = None, schedule: Optional[ScaleSchedule] = None,
                blend_filter: BlendSpec = None, dim: Optional[int] = None) -> FeatureGrid:
    """
    Reconstruct a grid from codes[p][i].

    LFQ/BSQ variants need the feature dimension (argument or spec.dim).
    Multi-scale variants need the schedule (argument, spec.schedule, or the
    default schedule when all N steps are present).
    """
    P = spec.product_branches
    if len(codes) != P:
        raise ShapeMismatchError(f"{len(codes)} code branches for {P} product branches")
    steps = {len(branch) for branch in codes}
    if len(steps) != 1 or 0 in steps:
        raise ShapeMismatchError(f"branches carry different or zero step counts: {sorted(steps)}")
    n = steps.pop()
    if n > spec.residual_steps:
        raise ConfigError(f"{n} code steps for an R{spec.residual_steps} variant")

    if spec.leaf.is_binary:
        dim = dim if dim is not None else spec.dim
        if dim is None:
            raise ConfigError(f"{spec.leaf.name} decode needs the feature dimension")
        if dim % P:
            raise ConfigError(f"dimension {dim} is not divisible into {P} equal branches")
        branch_dim = dim // P
    else:
        if not codebooks:
            raise ConfigError(f"{spec.name} decode needs {P} codebook(s)")
        branch_dim = codebooks[0].dim
    books = _check_codebooks(spec, codebooks, branch_dim)
    cfgs = [spec._residual_config(cb) for cb in books]

    if spec.multiscale:
        if schedule is None:
            schedule = spec.schedule
        if schedule is None:
            if n != spec.residual_steps:
                raise ConfigError("a truncated multi-scale stream needs its schedule to decode")
            schedule = default_schedule(codes[0][-1].height, spec.residual_steps)
        if schedule.steps != spec.residual_steps:
            raise ConfigError(f"schedule has {schedule.steps} steps, variant has R{spec.residual_steps}")
        parts = [msrq_decode(codes[p], schedule, cfgs[p], blend_filter, branch_dim) for p in range(P)]
    else:
        parts = [rq_decode(codes[p], cfgs[p], branch_dim) for p in range(P)]
    return pq_join(parts)


def pyramid_samples(grids: Sequence[FeatureGrid], spec: HierarchySpec) -> List[np.ndarray]:
    """
    Per-branch training vectors that do not depend on a codebook: every grid
    resampled to each scale of its schedule (the grid itself for single-scale
    variants).
    """
    pcfg = ProductConfig.equal(grids[0].dim, spec.product_branches)
    pools: List[List[np.ndarray]] = [[] for _ in range(pcfg.branches)]
    for g in grids:
        levels = [g]
        if spec.multiscale:
            sides = dict.fromkeys(_schedule_for(g, spec).resolutions)
            levels = [resample(g, s) for s in sides]
        for level in levels:
            for p, sub in enumerate(pq_split(level, pcfg)):
                pools[p].append(sub.vectors())
    return [np.concatenate(pool, axis=0) for pool in pools]


def collect_step_inputs(grids: Sequence[FeatureGrid], spec: HierarchySpec,
                        codebooks: Sequence[Codebook], blend_filter: BlendSpec = None) -> List[np.ndarray]:
    """Pool the leaf inputs of every residual step, per branch, at inference."""
    pools: List[List[np.ndarray]] = [[] for _ in range(spec.product_branches)]
    for g in grids:
        outcome = hier_encode(g, spec, codebooks, blend_filter=blend_filter)
        for p, trace in enumerate(outcome.traces):
            pools[p].extend(x.vectors() for x in trace.inputs)
    return [np.concatenate(pool, axis=0) for pool in pools]
