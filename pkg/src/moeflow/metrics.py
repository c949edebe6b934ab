"""Sample-quality metrics: multi-bandwidth MMD2, straightness, mode coverage.

The MMD estimator is the unbiased three-sum form with a summed
radial-basis kernel over a fixed bandwidth set. Unbiasedness means the
statistic can be negative for close distributions; values are reported
as-is, never clamped, so model comparisons near zero stay fair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import MixtureSpec, SampleSet
from .errors import (
    DimensionMismatchError,
    UnsupportedSpecError,
    ValidationError,
)
from .flow import Trajectory

DEFAULT_BANDWIDTHS = (0.2, 0.5, 1.0, 2.0, 5.0)


@dataclass(frozen=True)
class MmdConfig:
    bandwidths: tuple = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        bw = tuple(float(s) for s in self.bandwidths)
        if not bw:
            raise ValidationError("bandwidth set must be nonempty")
        if any(s <= 0 for s in bw):
            raise ValidationError("bandwidths must all be positive")
        object.__setattr__(self, "bandwidths", bw)


@dataclass
class MetricsReport:
    """One evaluation row: sample quality plus the settings that produced it."""

    mmd2: float
    straightness_mean: float
    straightness_max: float
    mode_coverage: float | None  # None when the reference has no component means
    n_samples: int
    steps: int

    def __post_init__(self):
        if self.straightness_mean < 1.0 - 1e-9 or self.straightness_max < 1.0 - 1e-9:
            raise ValidationError("straightness ratios must be >= 1 - 1e-9")
        if self.mode_coverage is not None and not 0.0 <= self.mode_coverage <= 1.0:
            raise ValidationError("mode coverage must lie in [0, 1]")
        if self.n_samples < 1 or self.steps < 1:
            raise ValidationError("n_samples and steps must be positive")


def _points(x) -> np.ndarray:
    arr = x.points if isinstance(x, SampleSet) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError("samples must form a 2-D array (n, m)")
    return arr


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise squared distances; clipped at zero against cancellation."""
    sq = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(sq, 0.0)


def _kernel(sq: np.ndarray, bandwidths) -> np.ndarray:
    total = np.zeros_like(sq)
    for s in bandwidths:
        total += np.exp(-sq / (2.0 * s * s))
    return total


_BLOCK_ROWS = 512


def _kernel_block_sum(a, b, bandwidths, exclude_diagonal: bool = False) -> float:
    """Sum of all kernel entries, computed in row blocks to bound memory."""
    total = 0.0
    for start in range(0, len(a), _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, len(a))
        kern = _kernel(_sq_dists(a[start:stop], b), bandwidths)
        if exclude_diagonal:
            rows = np.arange(start, stop)
            kern[rows - start, rows] = 0.0
        total += float(kern.sum())
    return total


class MmdScorer:
    """Unbiased MMD2 against a fixed reference set.

    The reference's within-set kernel sum is the expensive term when the
    reference is large; it only depends on the reference, so it is computed
    once here and reused across every scored sample set.
    """

    def __init__(self, reference, cfg: MmdConfig = MmdConfig()):
        self.reference = _points(reference)
        self.cfg = cfg
        m = len(self.reference)
        if m < 2:
            raise ValidationError("unbiased MMD needs at least 2 reference samples")
        self._ref_term = _kernel_block_sum(
            self.reference, self.reference, cfg.bandwidths, exclude_diagonal=True
        ) / (m * (m - 1))

    def score(self, x) -> float:
        xa = _points(x)
        if xa.shape[1] != self.reference.shape[1]:
            raise DimensionMismatchError("sample sets live in different dimensions")
        n, m = len(xa), len(self.reference)
        if n < 2:
            raise ValidationError("unbiased MMD needs at least 2 samples per set")
        sxx = _kernel_block_sum(xa, xa, self.cfg.bandwidths, exclude_diagonal=True)
        sxy = _kernel_block_sum(xa, self.reference, self.cfg.bandwidths)
        return float(sxx / (n * (n - 1)) + self._ref_term - 2.0 * sxy / (n * m))


def mmd2_unbiased(x, y, cfg: MmdConfig = MmdConfig()) -> float:
    """Unbiased squared MMD between two sample sets.

    1/(n(n-1)) sum_{i != j} k(x_i, x_j) + 1/(m(m-1)) sum_{i != j} k(y_i, y_j)
    - 2/(nm) sum_{i,j} k(x_i, y_j), with k the bandwidth-summed RBF kernel.
    """
    return MmdScorer(y, cfg).score(x)


def mmd_permutation_threshold(
    x, y, cfg: MmdConfig = MmdConfig(), n_permutations: int = 500,
    quantile: float = 0.99, seed: int = 0,
) -> float:
    """Permutation-null quantile of |MMD2| for the pooled samples.

    Kernel blocks are computed once on the pool; each permutation only
    reindexes them through a boolean membership vector, so the cost per
    permutation is two matrix-vector products.
    """
    xa, ya = _points(x), _points(y)
    if xa.shape[1] != ya.shape[1]:
        raise DimensionMismatchError("sample sets live in different dimensions")
    n, m = len(xa), len(ya)
    if n < 2 or m < 2:
        raise ValidationError("permutation test needs at least 2 samples per set")
    pool = np.concatenate([xa, ya], axis=0)
    kern = _kernel(_sq_dists(pool, pool), cfg.bandwidths)
    np.fill_diagonal(kern, 0.0)
    total = kern.sum()
    rng = np.random.default_rng(seed)
    stats = np.empty(n_permutations)
    for p in range(n_permutations):
        mask = np.zeros(n + m, dtype=bool)
        mask[rng.permutation(n + m)[:n]] = True
        row = kern @ mask.astype(np.float64)
        sxx = float(row[mask].sum())       # i, j both in x (diagonal is zero)
        sxy = float(row[~mask].sum())      # i in y, j in x; symmetric cross sum
        syy = float(total - sxx - 2.0 * sxy)
        stats[p] = abs(
            sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2.0 * sxy / (n * m)
        )
    return float(np.quantile(stats, quantile))


def straightness(traj: Trajectory) -> float:
    """Arc length over chord length; exactly 1 for straight-line transport."""
    steps = np.diff(traj.states, axis=0)
    arc = float(np.sum(np.linalg.norm(steps, axis=1)))
    chord = float(np.linalg.norm(traj.states[-1] - traj.states[0]))
    if chord == 0.0:
        raise ValidationError("straightness undefined for a zero-length chord")
    return arc / chord


def straightness_stats(trajectories) -> tuple:
    """(mean, max) straightness over a collection of trajectories."""
    values = np.array([straightness(tr) for tr in trajectories])
    if len(values) == 0:
        raise ValidationError("no trajectories to evaluate")
    return float(values.mean()), float(values.max())


def mode_coverage(samples, spec: MixtureSpec, radius: float | None = None) -> float:
    """Fraction of mixture components with >= 1 sample within the radius.

    The default radius is 3x the component std, which captures about 99%
    of a mode's mass in 2-D.
    """
    if spec.kind == "halfmoon":
        raise UnsupportedSpecError("mode coverage needs explicit component means")
    pts = _points(samples)
    if pts.shape[1] != spec.dim:
        raise DimensionMismatchError("samples and spec dimensions disagree")
    covered = 0
    for _, mean, std in spec.components:
        r = radius if radius is not None else 3.0 * std
        if r <= 0:
            raise ValidationError("coverage radius must be positive")
        d2 = np.sum((pts - np.asarray(mean)[None, :]) ** 2, axis=1)
        covered += bool((d2 <= r * r).any())
    return covered / len(spec.components)
