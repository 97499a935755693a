"""Weighted conditional MMD and the variance-based feature importance.

For a feature value ``x`` the conditional weights are

    omega^a_i = s_i(x) * w^a_i,   s_i(x) = k(x_i, x) / sum_l k(x_l, x)

(``k`` is an indicator for discrete features and a Gaussian kernel for
continuous ones). The squared MMD between the weighted outcome samples is

    D2(x) = (omega^0 - omega^1)^T K_Y (omega^0 - omega^1)

and the importance of feature ``m`` is the sample variance (``1/(n-1)``) of
``D2`` over the observed values ``x_{m,1..n}``.

Writing ``v = w^0 - w^1`` the difference of weights is ``s(x) * v``, which
lets every evaluation point share one outcome-side matrix: the Gram matrix
``K_Y`` in exact mode, or ``C = diag(v) Z`` with ``Z`` the random Fourier
features of ``y`` in RFF mode, where ``D2(x) = ||s(x)^T C||^2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .kernels import (
    DEFAULT_MEDIAN_CAP,
    BandwidthError,
    RFFMap,
    gaussian_gram,
    make_rff,
    median_heuristic,
    pivoted_cholesky_gaussian,
    rff_features,
)
from .propensity import IPWeights

MODES = ("rff", "exact")
NEG_TOL = 1e-10


class EmptyStratumError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pointwise estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalWeights:
    omega0: np.ndarray
    omega1: np.ndarray
    m: int
    x: float

    @property
    def difference(self) -> np.ndarray:
        return self.omega0 - self.omega1


def conditional_weights_discrete(dataset: Dataset, m: int, x: float, ipw: IPWeights) -> ConditionalWeights:
    match = dataset.column(m) == x
    count = int(match.sum())
    if count == 0:
        raise EmptyStratumError(f"empty stratum: no row has feature {m} equal to {x!r}")
    s = match / count
    return ConditionalWeights(s * ipw.w0, s * ipw.w1, m, float(x))


def conditional_weights_continuous(
    dataset: Dataset, m: int, x: float, ipw: IPWeights, h_x: float
) -> ConditionalWeights:
    # The 1/h factors of the smoothed indicator cancel in the ratio.
    k = gaussian_gram(dataset.column(m), [x], h_x)[:, 0]
    total = k.sum()
    if not total > 0:
        # Gaussian weights underflowed everywhere; fall back to log-space normalisation.
        logk = -((dataset.column(m) - x) ** 2) / h_x**2
        k = np.exp(logk - logk.max())
        total = k.sum()
    s = k / total
    return ConditionalWeights(s * ipw.w0, s * ipw.w1, m, float(x))


def normalize_arms(weights: ConditionalWeights) -> ConditionalWeights:
    """Rescale each arm to total mass one; an arm with no mass stays zero."""
    arms = []
    for omega in (weights.omega0, weights.omega1):
        total = omega.sum()
        arms.append(omega / total if total > 0 else omega.copy())
    return ConditionalWeights(arms[0], arms[1], weights.m, weights.x)


def _clamp_nonneg(values):
    arr = np.asarray(values, dtype=np.float64)
    if np.any(arr < -NEG_TOL):
        raise FloatingPointError(f"squared MMD evaluated to {arr.min():.3e} < -{NEG_TOL}; numerical failure")
    return np.maximum(arr, 0.0)


def d2_exact(dataset: Dataset, weights: ConditionalWeights, h_y: float) -> float:
    """O(n^2) double-sum estimate of the squared conditional MMD at one point."""
    delta = weights.difference
    support = np.flatnonzero(delta)
    if support.size == 0:
        return 0.0
    # Tied outcomes share a kernel row, so their weights can be pooled first.
    y, inverse = np.unique(dataset.outcome[support], return_inverse=True)
    delta = np.bincount(inverse, weights=delta[support], minlength=y.size)
    value = float(delta @ gaussian_gram(y, y, h_y) @ delta)
    return float(_clamp_nonneg(value))


def d2_rff(dataset: Dataset, weights: ConditionalWeights, rff: RFFMap) -> float:
    """O(rn) estimate ``||mu0 - mu1||^2`` from weighted random feature means."""
    z = rff_features(rff, dataset.outcome)
    mu0 = weights.omega0 @ z
    mu1 = weights.omega1 @ z
    diff = mu0 - mu1
    return float(diff @ diff)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bandwidths:
    """Outcome bandwidth and per-feature bandwidths (``None`` for discrete columns)."""

    h_y: float
    h_x: tuple[float | None, ...]


def compute_bandwidths(
    dataset: Dataset,
    cap: int | None = DEFAULT_MEDIAN_CAP,
    seed: int = 0,
    h_y: float | None = None,
) -> Bandwidths:
    """Median-heuristic bandwidths for the outcome and every continuous feature.

    Constant continuous columns get ``None``; the outcome must not be constant
    unless ``h_y`` is given.
    """
    if h_y is None:
        h_y = median_heuristic(dataset.outcome, cap, seed)
    h_x = []
    for m in range(dataset.d):
        if dataset.is_discrete(m):
            h_x.append(None)
            continue
        try:
            h_x.append(median_heuristic(dataset.column(m), cap, seed))
        except BandwidthError:
            h_x.append(None)
    return Bandwidths(float(h_y), tuple(h_x))


@dataclass(frozen=True)
class ImportanceConfig:
    """Settings for the importance statistic.

    ``h_y`` / ``h_x`` override the median heuristic; ``h_x`` may be a
    sequence indexed by feature or a mapping from feature index.
    ``lowrank_tol`` enables the factorised evaluation path (RFF mode only):
    the outcome features are compressed by SVD (singular values below
    ``lowrank_tol`` times the largest are dropped) and the feature kernel by
    pivoted Cholesky (residual diagonal at most ``lowrank_tol``). Results
    match the direct path to roughly ``sqrt(n) * lowrank_tol`` relative.
    ``normalize`` selects self-normalised conditional weights, see
    :class:`WCMMDEstimator`.
    """

    mode: str = "rff"
    r: int = 1000
    seed: int = 0
    h_y: float | None = None
    h_x: Sequence[float | None] | Mapping[int, float] | None = None
    median_cap: int | None = DEFAULT_MEDIAN_CAP
    lowrank_tol: float | None = None
    normalize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.r < 1:
            raise ValueError("r must be >= 1")

    def bandwidths(self, dataset: Dataset) -> Bandwidths:
        """Median-heuristic bandwidths with any explicit overrides applied."""
        base = compute_bandwidths(dataset, self.median_cap, h_y=self.h_y)
        h_x = list(base.h_x)
        if self.h_x is not None:
            items = self.h_x.items() if isinstance(self.h_x, Mapping) else enumerate(self.h_x)
            for m, h in items:
                if h is not None:
                    h_x[m] = float(h)
        return Bandwidths(base.h_y, tuple(h_x))


@dataclass(frozen=True, eq=False)
class MMDCurve:
    m: int
    x: np.ndarray
    d2: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.d2.tolist()))


@dataclass(frozen=True, eq=False)
class ImportanceResult:
    m: int
    importance: float
    curve: MMDCurve
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "importance": self.importance,
            "degenerate": self.degenerate,
            "curve": [[x, v] for x, v in self.curve.points],
        }


def sample_variance(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(np.var(v, ddof=1))


# ---------------------------------------------------------------------------
# Vectorised estimator over all evaluation points
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class WCMMDEstimator:
    """Evaluates ``D2`` at every row of a feature column for fixed ``(a, y, w)``.

    The outcome-side matrix is built once, so repeated calls with different
    feature columns (as in a conditional randomization test) only pay for the
    feature kernel.

    With ``normalize=True`` each arm's conditional weights are rescaled to sum
    to one at every ``x`` (self-normalised importance weights). The
    unnormalised weights sum to one only in expectation, and the fluctuation
    of that mass otherwise dominates ``D2`` when propensities are extreme.
    """

    outcome: np.ndarray
    ipw: IPWeights
    mode: str = "rff"
    h_y: float = 1.0
    rff: RFFMap | None = None
    lowrank_tol: float | None = None
    normalize: bool = False
    _gram: np.ndarray | None = field(default=None, init=False, repr=False)
    _embed: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        y = np.asarray(self.outcome, dtype=np.float64)
        self.outcome = y
        if self.ipw.w0.shape != y.shape:
            raise ValueError("weights and outcome lengths differ")
        self._arm_weights = np.column_stack([self.ipw.w0, self.ipw.w1])
        if self.mode == "exact":
            levels, inverse = np.unique(y, return_inverse=True)
            self._ties = None
            if levels.size < y.size:
                order = np.argsort(inverse, kind="stable")
                self._ties = (order, np.searchsorted(inverse[order], np.arange(levels.size)))
            else:
                levels = y
            self._gram = gaussian_gram(levels, levels, self.h_y)
            return
        if self.rff is None:
            raise ValueError("RFF mode needs an RFFMap")
        z = rff_features(self.rff, y)
        if self.lowrank_tol is not None:
            # Z = U S V^T with orthonormal V: inner products survive in U S.
            u, s, _ = np.linalg.svd(z, full_matrices=False)
            keep = s > self.lowrank_tol * s[0]
            z = u[:, keep] * s[keep]
        self._embed = z
        # [w0 * Z | w1 * Z | w0 | w1 | 1]; one smoother product gives every sum needed.
        self._stack = np.hstack([
            self.ipw.w0[:, None] * z,
            self.ipw.w1[:, None] * z,
            self._arm_weights,
            np.ones((y.size, 1)),
        ])

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        ipw: IPWeights,
        config: ImportanceConfig = ImportanceConfig(),
        h_y: float | None = None,
    ) -> "WCMMDEstimator":
        if h_y is None:
            h_y = config.h_y if config.h_y is not None else median_heuristic(dataset.outcome, config.median_cap)
        rff = make_rff(h_y, config.r, config.seed) if config.mode == "rff" else None
        return cls(dataset.outcome, ipw, config.mode, float(h_y), rff, config.lowrank_tol, config.normalize)

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def embedding_rank(self) -> int | None:
        return None if self._embed is None else self._embed.shape[1]

    def _arm_scales(self, mass: np.ndarray, sums: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row factors turning smoother-weighted sums into conditional weights."""
        if not self.normalize:
            return 1.0 / sums, 1.0 / sums
        with np.errstate(divide="ignore"):
            scale = np.where(mass > 0, 1.0 / mass, 0.0)
        return scale[:, 0], scale[:, 1]

    def _from_product(self, product: np.ndarray) -> np.ndarray:
        """``D2`` from ``S @ self._stack`` for an unnormalised smoother ``S``."""
        k = self._embed.shape[1]
        c0, c1 = self._arm_scales(product[:, 2 * k:2 * k + 2], product[:, -1])
        diff = c0[:, None] * product[:, :k] - c1[:, None] * product[:, k:2 * k]
        return _clamp_nonneg(np.einsum("ij,ij->i", diff, diff))

    def _from_smoother(self, s: np.ndarray) -> np.ndarray:
        # Row x of sv holds omega1(x) - omega0(x) up to sign: O(n^2) to form.
        c0, c1 = self._arm_scales(s @ self._arm_weights, s.sum(axis=1))
        sv = s * (c0[:, None] * self.ipw.w0[None, :] - c1[:, None] * self.ipw.w1[None, :])
        if self.mode == "rff":
            diff = sv @ self._embed  # O(r n^2)
            return _clamp_nonneg(np.einsum("ij,ij->i", diff, diff))
        if self._ties is not None:
            order, starts = self._ties
            sv = np.add.reduceat(sv[:, order], starts, axis=1)
        p = sv @ self._gram  # O(n^3)
        return _clamp_nonneg(np.einsum("ij,ij->i", p, sv))

    def curve(self, x, *, discrete: bool = False, h_x: float | None = None) -> np.ndarray:
        """``D2(x_iota)`` for every entry of the feature column ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"feature column must have shape ({self.n},)")
        if discrete or np.ptp(x) == 0:
            levels, inverse = np.unique(x, return_inverse=True)
            onehot = (inverse[None, :] == np.arange(levels.size)[:, None]).astype(np.float64)
            return self._from_smoother(onehot)[inverse]
        if h_x is None:
            raise ValueError("continuous features need a bandwidth h_x")
        if self.mode == "rff" and self.lowrank_tol is not None:
            factor = pivoted_cholesky_gaussian(x, h_x, self.lowrank_tol, max_rank=max(1, self.n // 4))
            if factor is not None:
                return self._from_product(factor @ (factor.T @ self._stack))
        return self._from_smoother(gaussian_gram(x, x, h_x))

    def importance(self, x, *, discrete: bool = False, h_x: float | None = None) -> float:
        return sample_variance(self.curve(x, discrete=discrete, h_x=h_x))


def importance(
    dataset: Dataset,
    m: int,
    ipw: IPWeights,
    config: ImportanceConfig = ImportanceConfig(),
    bandwidths: Bandwidths | None = None,
    estimator: WCMMDEstimator | None = None,
) -> ImportanceResult:
    """Importance of feature ``m``: sample variance of ``D2`` over its observed values.

    RFF mode costs O(r n^2) and exact mode O(n^3). Pass a prebuilt
    ``estimator`` to share the outcome-side work across features.
    """
    if not 0 <= m < dataset.d:
        raise IndexError(f"feature index {m} out of range for d={dataset.d}")
    if bandwidths is None:
        bandwidths = config.bandwidths(dataset)
    if estimator is None:
        estimator = WCMMDEstimator.from_dataset(dataset, ipw, config, bandwidths.h_y)
    x = dataset.column(m)
    degenerate = bool(np.ptp(x) == 0)
    if degenerate:
        warnings.warn(f"feature {m} takes a single value; its importance is 0", stacklevel=2)
    discrete = dataset.is_discrete(m)
    h_x = bandwidths.h_x[m]
    if not (discrete or degenerate) and h_x is None:
        raise BandwidthError(f"no bandwidth available for continuous feature {m}")
    d2 = estimator.curve(x, discrete=discrete, h_x=h_x)
    value = 0.0 if degenerate else sample_variance(d2)
    return ImportanceResult(m, value, MMDCurve(m, np.array(x), d2), degenerate)


def cate_variance_statistic(
    dataset: Dataset,
    m: int,
    ipw: IPWeights,
    bandwidths: Bandwidths | None = None,
) -> float:
    """Sample variance over rows of the weighted mean contrast ``sum(omega1 y) - sum(omega0 y)``.

    A mean-based comparator: it only reacts to features that shift the
    conditional average treatment effect.
    """
    x = dataset.column(m)
    if np.ptp(x) == 0:
        return 0.0
    vy = ipw.difference * dataset.outcome
    if dataset.is_discrete(m):
        levels, inverse = np.unique(x, return_inverse=True)
        sums = np.bincount(inverse, weights=vy, minlength=levels.size)
        counts = np.bincount(inverse, minlength=levels.size)
        contrast = -(sums / counts)[inverse]
    else:
        if bandwidths is None:
            h_x = median_heuristic(x)
        else:
            h_x = bandwidths.h_x[m]
        k = gaussian_gram(x, x, h_x)
        contrast = -(k @ vy) / k.sum(axis=1)
    return sample_variance(contrast)


__all__ = [
    "Bandwidths",
    "ConditionalWeights",
    "EmptyStratumError",
    "ImportanceConfig",
    "ImportanceResult",
    "MMDCurve",
    "WCMMDEstimator",
    "cate_variance_statistic",
    "compute_bandwidths",
    "conditional_weights_continuous",
    "conditional_weights_discrete",
    "d2_exact",
    "d2_rff",
    "importance",
    "normalize_arms",
    "sample_variance",
]
