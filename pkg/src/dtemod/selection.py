"""Benjamini-Hochberg adjustment and the end-to-end selection pipeline."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._seeding import derive_seed
from .crt import PVALUE_METHODS, CrtResult, crt_pvalue, fit_sampler
from .dataset import Dataset
from .propensity import PropensityConfig, fit_propensity, ipw_weights
from .wcmmd import MODES, ImportanceConfig, WCMMDEstimator, importance


def bh_adjust(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in the input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p-values must be a 1-d sequence")
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    d = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * d / np.arange(1, d + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.maximum(adjusted, p[order])  # p * d / d can round one ulp low
    out = np.empty(d)
    out[order] = np.minimum(adjusted, 1.0)
    return out


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.05
    B: int = 100
    r: int = 1000
    mode: str = "rff"
    sampler: str = "conditional"
    pvalue: str = "paper"
    seed: int = 0
    threads: int = 1
    propensity: PropensityConfig | None = None
    lowrank_tol: float | None = 1e-12
    median_cap: int | None = 2000
    normalize: bool = True
    refit_propensity: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.pvalue not in PVALUE_METHODS:
            raise ValueError(f"pvalue must be one of {PVALUE_METHODS}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def propensity_config(self) -> PropensityConfig:
        if self.propensity is not None:
            return self.propensity
        return PropensityConfig(seed=derive_seed(self.seed, "propensity"))

    def importance_config(self) -> ImportanceConfig:
        return ImportanceConfig(
            mode=self.mode,
            r=self.r,
            seed=derive_seed(self.seed, "rff"),
            median_cap=self.median_cap,
            lowrank_tol=self.lowrank_tol if self.mode == "rff" else None,
            normalize=self.normalize,
        )


@dataclass
class SelectionResult:
    names: tuple[str, ...]
    importances: np.ndarray
    raw_p: np.ndarray
    adjusted_p: np.ndarray
    alpha: float
    crt: list[CrtResult | None] = field(repr=False)
    errors: dict[int, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(int(m) for m in np.flatnonzero(self.adjusted_p <= self.alpha) if m not in self.errors)

    @property
    def selected_names(self) -> list[str]:
        return [self.names[m] for m in self.selected]

    def to_dict(self, include_null: bool = False) -> dict:
        features = []
        for m, name in enumerate(self.names):
            row = {
                "index": m,
                "feature": name,
                "importance": float(self.importances[m]),
                "raw_p": float(self.raw_p[m]),
                "adjusted_p": float(self.adjusted_p[m]),
                "selected": m in self.selected,
                "tested": m not in self.errors,
            }
            if m in self.errors:
                row["error"] = self.errors[m]
            if include_null and self.crt[m] is not None:
                row["null"] = self.crt[m].to_dict()["null"]
            features.append(row)
        return {
            "alpha": self.alpha,
            "selected": self.selected_names,
            "features": features,
            "timings": self.timings,
        }

    def to_json(self, path=None, include_null: bool = False) -> str:
        text = json.dumps(self.to_dict(include_null), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "importance", "raw_p", "adjusted_p", "selected"])
            chosen = set(self.selected)
            for m, name in enumerate(self.names):
                writer.writerow([
                    name,
                    repr(float(self.importances[m])),
                    repr(float(self.raw_p[m])),
                    repr(float(self.adjusted_p[m])),
                    int(m in chosen),
                ])


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def select(dataset: Dataset, config: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Test every feature for distributional effect modification and apply BH.

    The propensity model, bandwidths and outcome embedding are computed once
    and shared by every feature and every CRT replicate. Seeds for each
    feature are keyed by column name, so reordering columns only reorders
    the output.
    """
    timings = {}
    t0 = time.perf_counter()
    model = fit_propensity(dataset, config.propensity_config())
    ipw = ipw_weights(model, dataset)
    timings["propensity"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    icfg = config.importance_config()
    bandwidths = icfg.bandwidths(dataset)
    estimator = WCMMDEstimator.from_dataset(dataset, ipw, icfg, bandwidths.h_y)
    errors: dict[int, str] = {}

    def score(m: int) -> float:
        try:
            return importance(dataset, m, ipw, icfg, bandwidths, estimator).importance
        except Exception as exc:  # reported per feature, run continues
            errors[m] = f"importance: {type(exc).__name__}: {exc}"
            return float("nan")

    scores = np.array(_map(score, range(dataset.d), config.threads))
    timings["importance"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def test(m: int) -> CrtResult | None:
        if m in errors:
            return None
        name = dataset.names[m]
        discrete = dataset.is_discrete(m)
        h_x = bandwidths.h_x[m]

        def statistic(ds: Dataset) -> float:
            if config.refit_propensity and ds is not dataset:
                # weights follow the resampled column; bandwidths stay fixed
                refit = ipw_weights(fit_propensity(ds, config.propensity_config()), ds)
                est = WCMMDEstimator.from_dataset(ds, refit, icfg, bandwidths.h_y)
                return est.importance(ds.column(m), discrete=discrete, h_x=h_x)
            return estimator.importance(ds.column(m), discrete=discrete, h_x=h_x)

        try:
            sampler = fit_sampler(dataset, m, config.sampler, derive_seed(config.seed, name, "sampler"))
            return crt_pvalue(
                dataset, m, statistic, sampler, config.B, derive_seed(config.seed, name, "crt"),
                method=config.pvalue,
            )
        except Exception as exc:  # reported per feature, run continues
            errors[m] = f"crt: {type(exc).__name__}: {exc}"
            return None

    crt = _map(test, range(dataset.d), config.threads)
    timings["crt"] = time.perf_counter() - t0

    raw = np.array([1.0 if res is None else res.pvalue for res in crt])
    adjusted = bh_adjust(raw)
    return SelectionResult(
        dataset.names, scores, raw, adjusted, config.alpha, crt, dict(sorted(errors.items())), timings
    )


def evaluate_tpr_fpr(selected, true_set: Iterable[int], d: int | None = None) -> tuple[float, float]:
    """``(|S & T| / |T|, |S - T| / (d - |T|))`` for selected set S and true set T."""
    if isinstance(selected, SelectionResult):
        d = len(selected.names) if d is None else d
        selected = selected.selected
    if d is None:
        raise ValueError("d is required when passing a bare index set")
    chosen = set(int(m) for m in selected)
    truth = set(int(m) for m in true_set)
    if not truth:
        raise ValueError("true set is empty; TPR is undefined")
    if any(not 0 <= m < d for m in chosen | truth):
        raise ValueError(f"indices must lie in [0, {d})")
    tpr = len(chosen & truth) / len(truth)
    negatives = d - len(truth)
    fpr = len(chosen - truth) / negatives if negatives else 0.0
    return tpr, fpr


def mean_adjusted_p(results: Iterable[SelectionResult]) -> dict[str, float]:
    """Per-feature mean of BH-adjusted p-values over repeated runs.

    A reporting summary only: an average of p-values is not itself a p-value.
    """
    results = list(results)
    if not results:
        raise ValueError("no results to summarise")
    names = results[0].names
    if any(r.names != names for r in results):
        raise ValueError("results cover different features")
    mean = np.mean([r.adjusted_p for r in results], axis=0)
    return dict(zip(names, map(float, mean)))


def config_dict(config: SelectionConfig) -> dict:
    out = asdict(config)
    out["propensity"] = asdict(config.propensity_config())
    return out


__all__ = [
    "SelectionConfig",
    "SelectionResult",
    "bh_adjust",
    "config_dict",
    "evaluate_tpr_fpr",
    "mean_adjusted_p",
    "select",
]
