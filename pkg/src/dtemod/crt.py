"""Conditional randomization test for a single feature.

A sampler for ``X_m | X_-m`` is fitted on the features alone. Each of the
``B`` replicates swaps column ``m`` for a fresh draw and recomputes the test
statistic with treatment and outcome held fixed. The p-value is the fraction
of replicate statistics at least as large as the observed one.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from ._seeding import rng_for, seed_sequence
from .dataset import Dataset

SAMPLER_KINDS = ("gaussian-linear", "discrete-multinomial", "marginal-naive")
PVALUE_METHODS = ("paper", "plus-one")
RIDGE = 1e-6


class SamplerError(ValueError):
    pass


class CrtError(RuntimeError):
    pass


def _others(features: np.ndarray, m: int) -> np.ndarray:
    return np.delete(np.asarray(features, dtype=np.float64), m, axis=1)


@dataclass(frozen=True, eq=False)
class GaussianLinearSampler:
    """``X_m = intercept + X_-m @ coef + N(0, tau^2)``."""

    m: int
    intercept: float
    coef: np.ndarray
    tau: float
    kind = "gaussian-linear"

    def __post_init__(self):
        if not self.tau >= 0:
            raise SamplerError("tau must be nonnegative")

    def conditional_mean(self, features) -> np.ndarray:
        return self.intercept + _others(features, self.m) @ self.coef

    def sample(self, features, rng: np.random.Generator) -> np.ndarray:
        mean = self.conditional_mean(features)
        noise = rng.standard_normal(mean.shape[0])
        return mean + self.tau * noise


@dataclass(frozen=True, eq=False)
class MultinomialSampler:
    """Softmax regression of a discrete column on the remaining features."""

    m: int
    levels: np.ndarray
    intercept: np.ndarray
    coef: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    kind = "discrete-multinomial"

    def probabilities(self, features) -> np.ndarray:
        z = (_others(features, self.m) - self.shift) / self.scale
        return softmax(self.intercept + z @ self.coef, axis=1)

    def sample(self, features, rng: np.random.Generator) -> np.ndarray:
        p = self.probabilities(features)
        u = rng.random(p.shape[0])
        idx = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        return self.levels[np.minimum(idx, self.levels.size - 1)]


@dataclass(frozen=True, eq=False)
class MarginalSampler:
    """Bootstrap from the observed column, ignoring the other features."""

    m: int
    values: np.ndarray
    kind = "marginal-naive"

    def sample(self, features, rng: np.random.Generator) -> np.ndarray:
        n = np.asarray(features).shape[0]
        return self.values[rng.integers(0, self.values.size, size=n)]


ConditionalSampler = GaussianLinearSampler | MultinomialSampler | MarginalSampler


def _fit_gaussian_linear(x_m: np.ndarray, others: np.ndarray, m: int) -> GaussianLinearSampler:
    n = x_m.shape[0]
    design = np.column_stack([np.ones(n), others])
    gram = design.T @ design
    rhs = design.T @ x_m
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned design")
        chol = np.linalg.cholesky(gram)
        beta = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    except np.linalg.LinAlgError:
        warnings.warn(f"singular design for feature {m}; using ridge penalty {RIDGE}", stacklevel=3)
        beta = np.linalg.solve(gram + RIDGE * n * np.eye(gram.shape[0]), rhs)
    resid = x_m - design @ beta
    dof = max(n - design.shape[1], 1)
    tau = float(np.sqrt(resid @ resid / dof))
    return GaussianLinearSampler(m, float(beta[0]), beta[1:], tau)


def _fit_multinomial(x_m: np.ndarray, others: np.ndarray, m: int, levels, l2: float = 1e-4) -> MultinomialSampler:
    levels = np.asarray(levels if levels is not None else np.unique(x_m), dtype=np.float64)
    k = levels.size
    labels = np.searchsorted(levels, x_m)
    if np.any(levels[np.minimum(labels, k - 1)] != x_m):
        raise SamplerError(f"feature {m} has values outside its level set")
    n, p = others.shape
    shift = others.mean(axis=0) if p else np.zeros(0)
    sd = others.std(axis=0) if p else np.ones(0)
    scale = np.where(sd > 0, sd, 1.0)
    z = (others - shift) / scale
    onehot = np.eye(k)[labels]

    def objective(theta):
        b = theta[:k]
        w = theta[k:].reshape(p, k)
        logits = b + z @ w
        logp = log_softmax(logits, axis=1)
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w * w)
        g = (np.exp(logp) - onehot) / n
        grad_w = z.T @ g + l2 * w
        return loss, np.concatenate([g.sum(axis=0), grad_w.ravel()])

    counts = onehot.sum(axis=0)
    theta0 = np.zeros(k * (p + 1))
    theta0[:k] = np.log(np.maximum(counts, 0.5) / n)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
    theta = res.x
    return MultinomialSampler(m, levels, theta[:k], theta[k:].reshape(p, k), shift, scale)


def fit_sampler(dataset: Dataset, m: int, kind: str = "conditional", seed: int = 0):
    """Fit a sampler for ``X_m`` given the other features.

    ``kind="conditional"`` picks ``gaussian-linear`` for continuous and
    ``discrete-multinomial`` for discrete columns; ``"naive"`` is an alias
    for ``marginal-naive``. Treatment and outcome are never read. ``seed`` is
    accepted for interface symmetry; every fit here is deterministic.
    """
    del seed
    if kind == "conditional":
        kind = "discrete-multinomial" if dataset.is_discrete(m) else "gaussian-linear"
    elif kind == "naive":
        kind = "marginal-naive"
    if kind not in SAMPLER_KINDS:
        raise SamplerError(f"unknown sampler kind {kind!r}; expected one of {SAMPLER_KINDS}")
    x_m = np.array(dataset.column(m))
    if kind == "marginal-naive":
        return MarginalSampler(m, x_m)
    others = _others(dataset.features, m)
    if kind == "gaussian-linear":
        if dataset.is_discrete(m):
            raise SamplerError(f"feature {m} is discrete; gaussian-linear needs a continuous column")
        return _fit_gaussian_linear(x_m, others, m)
    if not dataset.is_discrete(m):
        raise SamplerError(f"feature {m} is continuous; discrete-multinomial needs a discrete column")
    return _fit_multinomial(x_m, others, m, dataset.columns[m].levels)


def resample_feature(sampler, dataset: Dataset, seed_b) -> np.ndarray:
    """One draw of column ``m`` per row, deterministic in ``seed_b``."""
    return sampler.sample(dataset.features, rng_for(seed_b))


@dataclass(frozen=True, eq=False)
class CrtResult:
    m: int
    observed: float
    null: np.ndarray
    pvalue: float
    B: int
    method: str = "paper"

    @property
    def n_invalid(self) -> int:
        return int(np.sum(~np.isfinite(self.null)))

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "observed": self.observed,
            "pvalue": self.pvalue,
            "B": self.B,
            "method": self.method,
            "n_invalid": self.n_invalid,
            "null": [float(v) if np.isfinite(v) else None for v in self.null],
        }


def pvalue_from_draws(observed: float, null, method: str = "paper") -> float:
    """``#{b : null_b >= observed} / B`` (``paper``) or ``(1 + #) / (1 + B)`` (``plus-one``).

    Ties count as exceedances. Non-finite draws are ignored.
    """
    if method not in PVALUE_METHODS:
        raise ValueError(f"p-value method must be one of {PVALUE_METHODS}")
    null = np.asarray(null, dtype=np.float64)
    null = null[np.isfinite(null)]
    if null.size == 0:
        raise CrtError("no valid null draws")
    count = int(np.sum(null >= observed))
    if method == "paper":
        return count / null.size
    return (1 + count) / (1 + null.size)


def crt_pvalue(
    dataset: Dataset,
    m: int,
    statistic: Callable[[Dataset], float],
    sampler,
    B: int = 100,
    seed: int = 0,
    *,
    method: str = "paper",
    threads: int = 1,
    max_invalid: float = 0.05,
) -> CrtResult:
    """Run the conditional randomization test for feature ``m``.

    Replicate ``b`` draws its column from a stream keyed by ``(seed, b)``, so
    results do not depend on ``threads`` or on execution order.

    Raises
    ------
    CrtError
        If the observed statistic is non-finite or more than ``max_invalid``
        of the replicates return non-finite statistics.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    observed = float(statistic(dataset))
    if not np.isfinite(observed):
        raise CrtError(f"observed statistic for feature {m} is not finite")

    def replicate(b: int) -> float:
        column = resample_feature(sampler, dataset, seed_sequence(seed, b))
        value = float(statistic(dataset.replace_column(m, column)))
        return value if np.isfinite(value) else np.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            null = np.array(list(pool.map(replicate, range(B))), dtype=np.float64)
    else:
        null = np.array([replicate(b) for b in range(B)], dtype=np.float64)

    invalid = int(np.sum(~np.isfinite(null)))
    if invalid > max_invalid * B:
        raise CrtError(f"feature {m}: {invalid} of {B} replicates returned non-finite statistics")
    return CrtResult(m, observed, null, pvalue_from_draws(observed, null, method), B, method)
