"""Gaussian kernel, median-heuristic bandwidths and random Fourier features.

The Gaussian kernel used throughout is ``k(u, v) = exp(-(u - v)^2 / h^2)``
(no factor 1/2). Its spectral density is ``N(0, 2 / h^2)``, so random
frequencies are drawn with that variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

DEFAULT_MEDIAN_CAP = 2000


class BandwidthError(ValueError):
    pass


def _check_bandwidth(h: float) -> float:
    h = float(h)
    if not (h > 0 and math.isfinite(h)):
        raise BandwidthError(f"bandwidth must be positive and finite, got {h}")
    return h


def gaussian_kernel(u: float, v: float, h: float) -> float:
    h = _check_bandwidth(h)
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("kernel arguments must be finite")
    return math.exp(-((u - v) ** 2) / h**2)


def gaussian_gram(u, v, h: float) -> np.ndarray:
    """Matrix ``K[i, j] = exp(-(u_i - v_j)^2 / h^2)`` for 1-d inputs."""
    h = _check_bandwidth(h)
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    diff = u[:, None] - v[None, :]
    diff *= diff
    diff *= -1.0 / h**2
    return np.exp(diff, out=diff)


def median_heuristic(values, cap: int | None = DEFAULT_MEDIAN_CAP, seed: int = 0) -> float:
    """Median of pairwise absolute differences.

    At most ``cap`` points, subsampled uniformly without replacement with
    ``seed``, enter the computation; ``cap=None`` uses every point.

    Raises
    ------
    BandwidthError
        If the median distance is zero (e.g. a constant column). Set the
        bandwidth manually in that case.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise BandwidthError("median heuristic needs at least two values")
    if not np.all(np.isfinite(x)):
        raise BandwidthError("median heuristic got non-finite values")
    if cap is not None and x.size > cap:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.size, size=cap, replace=False)]
    h = float(np.median(pdist(x[:, None], "cityblock")))
    if h <= 0:
        raise BandwidthError("median pairwise distance is zero; set the bandwidth manually")
    return h


@dataclass(frozen=True, eq=False)
class RFFMap:
    """Random Fourier feature map for the Gaussian kernel of bandwidth ``h``.

    ``z(y)_i = sqrt(2 / r) cos(frequencies_i * y + phases_i)``, so that
    ``<z(u), z(v)>`` is an unbiased estimate of ``exp(-(u - v)^2 / h^2)``.
    """

    frequencies: np.ndarray
    phases: np.ndarray
    h: float
    seed: int

    def __post_init__(self):
        _check_bandwidth(self.h)
        if self.frequencies.ndim != 1 or self.frequencies.shape != self.phases.shape:
            raise ValueError("frequencies and phases must be 1-d arrays of equal length")
        if self.r < 1:
            raise ValueError("an RFF map needs r >= 1 features")
        if np.any(self.phases < 0) or np.any(self.phases >= 2 * np.pi):
            raise ValueError("phases must lie in [0, 2*pi)")

    @property
    def r(self) -> int:
        return self.frequencies.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RFFMap):
            return NotImplemented
        return (
            self.h == other.h
            and self.seed == other.seed
            and np.array_equal(self.frequencies, other.frequencies)
            and np.array_equal(self.phases, other.phases)
        )

    __hash__ = None

    def to_dict(self, embed: bool = False) -> dict:
        out = {"r": self.r, "h": self.h, "seed": self.seed}
        if embed:
            out["frequencies"] = self.frequencies.tolist()
            out["phases"] = self.phases.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RFFMap":
        if "frequencies" in data:
            return cls(
                np.asarray(data["frequencies"], dtype=np.float64),
                np.asarray(data["phases"], dtype=np.float64),
                float(data["h"]),
                int(data["seed"]),
            )
        return make_rff(data["h"], data["r"], data["seed"])


def make_rff(h: float, r: int, seed: int) -> RFFMap:
    h = _check_bandwidth(h)
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, math.sqrt(2.0) / h, size=r)
    phases = rng.uniform(0.0, 2 * np.pi, size=r)
    freqs.flags.writeable = False
    phases.flags.writeable = False
    return RFFMap(freqs, phases, h, int(seed))


def rff_features(rff: RFFMap, y) -> np.ndarray:
    """Feature vector ``z(y)``; an array of ``n`` inputs gives an (n, r) matrix."""
    y_arr = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y_arr)):
        raise ValueError("rff_features got non-finite input")
    scale = math.sqrt(2.0 / rff.r)
    if y_arr.ndim == 0:
        return scale * np.cos(rff.frequencies * float(y_arr) + rff.phases)
    z = np.multiply.outer(y_arr.ravel(), rff.frequencies)
    z += rff.phases
    np.cos(z, out=z)
    z *= scale
    return z


def pivoted_cholesky_gaussian(x, h: float, tol: float, max_rank: int | None = None) -> np.ndarray | None:
    """Low-rank factor ``L`` with ``L @ L.T`` approximating ``gaussian_gram(x, x, h)``.

    Greedy diagonal pivoting stops once every diagonal entry of the residual
    ``K - L L^T`` (which is positive semi-definite, so it bounds every entry)
    is at most ``tol``. Returns ``None`` when that needs more than
    ``max_rank`` columns.
    """
    h = _check_bandwidth(h)
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if max_rank is None:
        max_rank = n
    max_rank = min(max_rank, n)
    inv_h2 = 1.0 / h**2
    resid = np.ones(n)
    L = np.empty((n, min(max_rank, 64)))
    for k in range(max_rank + 1):
        p = int(np.argmax(resid))
        if resid[p] <= tol:
            return L[:, :k].copy()
        if k == max_rank:
            return None
        if k == L.shape[1]:
            L = np.concatenate([L, np.empty((n, min(L.shape[1], max_rank - k)))], axis=1)
        col = np.exp(-((x - x[p]) ** 2) * inv_h2)
        if k:
            col -= L[:, :k] @ L[p, :k]
        col /= math.sqrt(resid[p])
        resid -= col * col
        resid[p] = 0.0
        L[:, k] = col
    return None
