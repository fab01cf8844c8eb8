"""
Codebook learning and quantization metrics

Includes:
- k-means with k-means++ seeding (offline codebook fitting)
- EMA codebook refinement with Laplace-smoothed counts
- Residual k-means over the per-step inputs of a residual quantizer
- Loss terms: reconstruction, VQ (commitment-scaled), entropy auxiliary
- Codebook utilization and perplexity
"""

import logging
import threading
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr, expit

from config import (
    DEFAULT_COMMITMENT_BETA,
    DEFAULT_EMA_DECAY,
    DEFAULT_ENTROPY_TEMPERATURE,
    DENSE_HISTOGRAM_LIMIT,
    EMA_EPSILON,
    IGNORED_LOSS_TERMS,
    KMEANS_CONFIG,
    LOSS_WEIGHT_DEFAULTS,
)
from core import CodeRangeError, Codebook, ConfigError, FeatureGrid, NonFiniteError, Rng, ShapeMismatchError, mse
from leaf_quantizers import nearest_codewords

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the computable loss terms."""
    recon: float = LOSS_WEIGHT_DEFAULTS['recon']
    vq: float = LOSS_WEIGHT_DEFAULTS['vq']
    aux: float = LOSS_WEIGHT_DEFAULTS['aux']

    def __post_init__(self):
        for name in ('recon', 'vq', 'aux'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight '{name}' must be finite and >= 0, got {value}")

    @classmethod
    def from_mapping(cls, weights: Mapping[str, float]) -> 'LossWeights':
        """
        Build weights from a name -> value mapping.

        Perceptual, adversarial and clip weights are accepted and ignored
        with a warning; any other unknown name is an error.
        """
        known = {}
        for name, value in weights.items():
            if name in ('recon', 'vq', 'aux'):
                known[name] = float(value)
            elif name in IGNORED_LOSS_TERMS:
                message = f"loss weight '{name}' has no computable term and is ignored"
                warnings.warn(message)
                logger.warning(message)
            else:
                raise ConfigError(f"unknown loss weight '{name}'")
        return cls(**known)


class UtilizationTracker:
    """
    Per-code hit counters for one codebook.

    Hits are kept sparsely (code -> count), so a binary leaf with J = 2^32
    costs memory in proportion to the codes actually seen. record() may be
    called from several threads; read counters once the writers are done.
    """

    def __init__(self, size: int):
        if size < 1:
            raise ConfigError(f"codebook size must be >= 1, got {size}")
        self.size = int(size)
        self._hits: Dict[int, int] = {}
        self._lock = threading.Lock()

    def _add(self, codes: np.ndarray, counts: np.ndarray) -> None:
        with self._lock:
            for code, count in zip(codes.tolist(), counts.tolist()):
                self._hits[code] = self._hits.get(code, 0) + count

    def record(self, codes) -> None:
        codes = np.asarray(codes).ravel()
        if codes.size == 0:
            return
        if codes.min() < 0 or int(codes.max()) >= self.size:
            raise CodeRangeError(f"code {int(codes.max())} out of range for codebook of size {self.size}")
        values, counts = np.unique(codes.astype(np.int64), return_counts=True)
        self._add(values, counts)

    def merge(self, other: 'UtilizationTracker') -> None:
        if other.size != self.size:
            raise ShapeMismatchError(f"cannot merge trackers of size {other.size} and {self.size}")
        self._add(*other.counts())

    def counts(self) -> Tuple[np.ndarray, np.ndarray]:
        """(codes hit, hit counts), sorted by code."""
        with self._lock:
            items = sorted(self._hits.items())
        codes = np.array([c for c, _ in items], dtype=np.int64)
        hits = np.array([n for _, n in items], dtype=np.uint64)
        return codes, hits

    def histogram(self) -> np.ndarray:
        """Dense per-code counts; only for codebooks up to DENSE_HISTOGRAM_LIMIT."""
        if self.size > DENSE_HISTOGRAM_LIMIT:
            raise ConfigError(f"dense histogram of {self.size} codes is too large; use counts()")
        dense = np.zeros(self.size, dtype=np.uint64)
        codes, hits = self.counts()
        dense[codes] = hits
        return dense

    @property
    def used(self) -> int:
        return len(self._hits)

    @property
    def total(self) -> int:
        return int(sum(self._hits.values()))


def utilization(tracker: UtilizationTracker) -> float:
    """Fraction of codes hit at least once."""
    return tracker.used / tracker.size


def codebook_perplexity(tracker: UtilizationTracker) -> float:
    """exp of the entropy of the code usage distribution (0 with no hits)."""
    total = tracker.total
    if total == 0:
        return 0.0
    _, hits = tracker.counts()
    probs = hits.astype(np.float64) / total
    return float(np.exp(np.sum(entr(probs))))


def _check_samples(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] < 1:
        raise ShapeMismatchError(f"samples must be an (M, d) array, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteError("training samples must be finite")
    return samples


def _kmeans_plusplus(samples: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    m = samples.shape[0]
    centers = np.empty((k, samples.shape[1]))
    first = rng.integers(0, m)
    centers[0] = samples[first]
    diff = samples - centers[0]
    closest = np.sum(diff * diff, axis=1)
    for c in range(1, k):
        total = float(closest.sum())
        if total > 0:
            idx = rng.choice(m, p=closest / total)
        else:
            # every sample already coincides with a center
            idx = rng.integers(0, m)
        centers[c] = samples[idx]
        diff = samples - centers[c]
        closest = np.minimum(closest, np.sum(diff * diff, axis=1))
    return centers


def kmeans_fit(samples, size: int, iters: int = KMEANS_CONFIG['iters'],
               rng: Optional[Rng] = None) -> Tuple[Codebook, List[float]]:
    """
    Fit a codebook with Lloyd's algorithm.

    Args:
        samples: (M, d) training vectors
        size: number of codewords J
        iters: maximum Lloyd iterations
        rng: random stream for k-means++ seeding

    Returns:
        (codebook, objective trace); objective[t] is the mean squared
        distance to the assigned centroid at iteration t and never increases
    """
    samples = _check_samples(samples)
    m = samples.shape[0]
    if size < 1:
        raise ConfigError(f"codebook size must be >= 1, got {size}")
    if m < size:
        raise ConfigError(f"cannot fit {size} codewords to {m} samples (need at least {size})")
    if iters < 1:
        raise ConfigError(f"k-means needs at least one iteration, got {iters}")
    rng = rng or Rng(0)

    centers = _kmeans_plusplus(samples, size, rng)
    objectives: List[float] = []
    previous = None
    for it in range(iters):
        codes, dist = nearest_codewords(samples, centers)
        objectives.append(float(np.mean(dist)))
        if previous is not None and np.array_equal(codes, previous):
            break
        previous = codes

        counts = np.bincount(codes, minlength=size)
        sums = np.zeros_like(centers)
        np.add.at(sums, codes, samples)
        filled = counts > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / counts[filled, None]

        empty = np.flatnonzero(~filled)
        if empty.size:
            farthest = np.argsort(-dist, kind='stable')[:empty.size]
            centers[empty] = samples[farthest]
            logger.debug("k-means iteration %d: reseeded %d empty clusters", it, empty.size)

    logger.info("k-means: J=%d, M=%d, %d iterations, objective %.6g",
                size, m, len(objectives), objectives[-1])
    return Codebook(centers), objectives


@dataclass
class EMAState:
    """Running per-code counts and sums of an EMA-maintained codebook."""
    counts: np.ndarray
    sums: np.ndarray
    decay: float = DEFAULT_EMA_DECAY

    @classmethod
    def fresh(cls, codebook: Codebook, decay: float = DEFAULT_EMA_DECAY) -> 'EMAState':
        return cls(np.zeros(codebook.size), np.zeros_like(codebook.entries), decay)


def ema_update(cb: Codebook, samples, assignments, decay: float = DEFAULT_EMA_DECAY,
               state: Optional[EMAState] = None, epsilon: float = EMA_EPSILON) -> Codebook:
    """
    One EMA step over a batch.

    counts <- decay * counts + n_j, sums <- decay * sums + sum of x assigned
    to j; codeword j <- sums_j / smoothed count_j for every code hit in the
    batch. Codes without hits keep their entries.

    Args:
        cb: current codebook
        samples: (M, d) batch
        assignments: (M,) code index of each sample
        decay: lambda in (0, 1]
        state: running statistics, updated in place; fresh counters when None
        epsilon: Laplace smoothing constant
    """
    if not 0.0 < decay <= 1.0:
        raise ConfigError(f"EMA decay must lie in (0, 1], got {decay}")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, cb.dim)
    assignments = np.asarray(assignments).ravel()
    if assignments.shape[0] != samples.shape[0]:
        raise ShapeMismatchError(f"{assignments.shape[0]} assignments for {samples.shape[0]} samples")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteError("EMA batch must be finite")
    if assignments.size and (assignments.min() < 0 or int(assignments.max()) >= cb.size):
        raise CodeRangeError(f"assignment out of range for codebook of size {cb.size}")
    if state is None:
        state = EMAState.fresh(cb, decay)

    assignments = assignments.astype(np.intp)
    hits = np.bincount(assignments, minlength=cb.size).astype(np.float64)
    batch_sums = np.zeros_like(cb.entries)
    np.add.at(batch_sums, assignments, samples)
    state.counts = decay * state.counts + hits
    state.sums = decay * state.sums + batch_sums
    state.decay = decay

    hit = hits > 0
    if not np.any(hit):
        return cb
    total = state.counts.sum()
    smoothed = (state.counts + epsilon) / (total + cb.size * epsilon) * total
    entries = cb.entries.copy()
    entries[hit] = state.sums[hit] / smoothed[hit, None]
    return Codebook(entries)


def vq_loss(z: FeatureGrid, zq: FeatureGrid, beta: float = DEFAULT_COMMITMENT_BETA) -> float:
    """Codebook plus commitment term: (1 + beta) * mse(z, zq)."""
    return mse(z, zq) * (1.0 + beta)


def entropy_aux(pre_quant: Union[FeatureGrid, np.ndarray],
                temperature: float = DEFAULT_ENTROPY_TEMPERATURE) -> float:
    """
    Entropy auxiliary term for binary leaves.

    q = sigmoid(2 z / tau) per dimension. The result is the mean per-sample
    binary entropy minus the binary entropy of the mean q, summed over
    dimensions: 0 at z = 0, down to -ln 2 per dimension for confident and
    balanced codes.
    """
    if temperature <= 0:
        raise ConfigError(f"entropy temperature must be > 0, got {temperature}")
    z = pre_quant.vectors() if isinstance(pre_quant, FeatureGrid) else _check_samples(pre_quant)
    q = expit(2.0 * z / temperature)
    per_sample = np.mean(np.sum(entr(q) + entr(1.0 - q), axis=1))
    q_mean = np.mean(q, axis=0)
    batch = np.sum(entr(q_mean) + entr(1.0 - q_mean))
    return float(per_sample - batch)


def composite_loss(recon: float, vq: float, aux: float, w: LossWeights) -> float:
    """Weighted sum of the computable loss terms."""
    return w.recon * recon + w.vq * vq + w.aux * aux


def fit_residual_codebooks(initial: Sequence[np.ndarray], size: int,
                           step_inputs: Callable[[List[Codebook]], List[np.ndarray]],
                           rounds: int = KMEANS_CONFIG['refine_rounds'],
                           iters: int = KMEANS_CONFIG['iters'], rng: Optional[Rng] = None,
                           zero_augment: bool = True) -> Tuple[List[Codebook], List[List[float]]]:
    """
    Residual k-means, one codebook per branch.

    The first fit runs on `initial`; each refinement round encodes with the
    current codebooks, pools the leaf inputs of every residual step via
    `step_inputs` and refits on them. With zero_augment the last codeword
    is the zero vector, so a residual step never increases the error.

    Returns:
        (codebooks, objective trace of each branch's final fit)
    """
    if rounds < 0:
        raise ConfigError(f"refinement rounds must be >= 0, got {rounds}")
    if zero_augment and size < 2:
        raise ConfigError("a zero-augmented codebook needs at least 2 entries")
    rng = rng or Rng(0)
    fitted = size - 1 if zero_augment else size

    def fit(pools):
        books, traces = [], []
        for p, pool in enumerate(pools):
            cb, trace = kmeans_fit(pool, fitted, iters, rng)
            if zero_augment:
                cb = Codebook(np.vstack([cb.entries, np.zeros((1, cb.dim))]))
            books.append(cb)
            traces.append(trace)
            logger.debug("branch %d: objective %.6g", p, trace[-1])
        return books, traces

    books, traces = fit(initial)
    for r in range(rounds):
        books, traces = fit(step_inputs(books))
        logger.info("residual k-means round %d/%d done", r + 1, rounds)
    return books, traces
