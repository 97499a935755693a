"""Benchmark sweeps over scenarios and sample sizes.

Raw rows (one per repetition) and aggregate rows (one per cell) are written
as tidy CSV. The raw file doubles as a checkpoint: with ``resume`` any cell
repetition already recorded as ``ok`` is skipped.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from ._seeding import derive_seed
from .dataset import Scenario, generate_synthetic
from .propensity import fit_propensity, ipw_weights
from .selection import SelectionConfig, evaluate_tpr_fpr, select
from .wcmmd import WCMMDEstimator, importance

log = logging.getLogger(__name__)

DEFAULT_GRID = (500, 750, 1000, 1250, 1500, 1750, 2000)

RAW_FIELDS = [
    "scenario", "n", "rep", "mode", "sampler", "data_seed", "status",
    "tpr", "fpr", "n_selected", "selected",
    "seconds_propensity", "seconds_importance", "seconds_crt", "error",
]
AGG_FIELDS = [
    "scenario", "n", "mode", "sampler", "reps", "failures",
    "tpr_mean", "tpr_std", "fpr_mean", "fpr_std",
    "seconds_propensity", "seconds_importance", "seconds_crt",
]


@dataclass(frozen=True)
class BenchConfig:
    scenarios: tuple[str, ...] = ("LinMean", "NonlinMean", "LinVar", "NonlinVar")
    n_grid: tuple[int, ...] = DEFAULT_GRID
    reps: int = 10
    modes: tuple[str, ...] = ("rff",)
    samplers: tuple[str, ...] = ("conditional",)
    d: int = 30
    seed: int = 0
    importance_only: bool = False
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if list(self.n_grid) != sorted(self.n_grid) or len(set(self.n_grid)) != len(self.n_grid):
            raise ValueError("n grid must be strictly ascending")
        for name in self.scenarios:
            Scenario(name, d=self.d)

    def cells(self) -> Iterable[tuple[str, int, str, str]]:
        for scenario in self.scenarios:
            for n in self.n_grid:
                for mode in self.modes:
                    for sampler in self.samplers:
                        yield scenario, n, mode, sampler


def _key(row) -> tuple:
    return (row["scenario"], int(row["n"]), int(row["rep"]), row["mode"], row["sampler"])


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def time_importance(dataset, config: SelectionConfig) -> dict:
    """Propensity fit plus every feature's importance, without the CRT."""
    t0 = time.perf_counter()
    ipw = ipw_weights(fit_propensity(dataset, config.propensity_config()), dataset)
    t1 = time.perf_counter()
    icfg = replace(config.importance_config(), lowrank_tol=None)
    bandwidths = icfg.bandwidths(dataset)
    estimator = WCMMDEstimator.from_dataset(dataset, ipw, icfg, bandwidths.h_y)
    scores = [importance(dataset, m, ipw, icfg, bandwidths, estimator).importance for m in range(dataset.d)]
    t2 = time.perf_counter()
    return {"propensity": t1 - t0, "importance": t2 - t1, "scores": scores}


def run_one(scenario: str, n: int, rep: int, mode: str, sampler: str, config: BenchConfig) -> dict:
    data_seed = derive_seed(config.seed, "data", scenario, n, rep)
    row = {"scenario": scenario, "n": n, "rep": rep, "mode": mode, "sampler": sampler, "data_seed": data_seed}
    spec = Scenario(scenario, d=config.d)
    try:
        dataset = generate_synthetic(spec, n, data_seed)
        sel_cfg = replace(config.selection, mode=mode, sampler=sampler,
                          seed=derive_seed(config.seed, "select", scenario, n, rep))
        if config.importance_only:
            # Direct evaluation, so timings reflect the O(rn^2) / O(n^3) costs.
            timing = time_importance(dataset, sel_cfg)
            row.update(status="ok", seconds_propensity=timing["propensity"],
                       seconds_importance=timing["importance"])
            return row
        result = select(dataset, sel_cfg)
        if spec.true_set:
            tpr, fpr = evaluate_tpr_fpr(result, spec.true_set, config.d)
        else:  # no modifiers: every selection is a false positive
            tpr, fpr = math.nan, len(result.selected) / config.d
        row.update(
            status="ok", tpr=tpr, fpr=fpr, n_selected=len(result.selected),
            selected=" ".join(result.selected_names),
            seconds_propensity=result.timings["propensity"],
            seconds_importance=result.timings["importance"],
            seconds_crt=result.timings["crt"],
        )
    except Exception as exc:  # recorded per cell; the sweep continues
        log.exception("cell %s failed", row)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def read_raw(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def aggregate(rows: list[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((row["scenario"], int(row["n"]), row["mode"], row["sampler"]), []).append(row)
    out = []
    for (scenario, n, mode, sampler), group in cells.items():
        ok = [r for r in group if r["status"] == "ok"]

        def stats(name):
            vals = np.array([float(r[name]) for r in ok if r.get(name) not in (None, "")])
            if vals.size == 0:
                return math.nan, math.nan
            return float(vals.mean()), float(vals.std())

        tpr = stats("tpr")
        fpr = stats("fpr")
        out.append({
            "scenario": scenario, "n": n, "mode": mode, "sampler": sampler,
            "reps": len(ok), "failures": len(group) - len(ok),
            "tpr_mean": tpr[0], "tpr_std": tpr[1], "fpr_mean": fpr[0], "fpr_std": fpr[1],
            "seconds_propensity": stats("seconds_propensity")[0],
            "seconds_importance": stats("seconds_importance")[0],
            "seconds_crt": stats("seconds_crt")[0],
        })
    return out


def write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})


def run_bench(config: BenchConfig, raw_path, agg_path, resume: bool = False) -> list[dict]:
    """Run every (scenario, n, mode, sampler, rep) and write both CSV files.

    Returns the aggregate rows. Rows are flushed to ``raw_path`` after each
    repetition so an interrupted sweep can resume.
    """
    done = {}
    if resume:
        for row in read_raw(raw_path):
            if row["status"] == "ok":
                done[_key(row)] = row
    rows = list(done.values())
    write_rows(raw_path, RAW_FIELDS, rows)
    for scenario, n, mode, sampler in config.cells():
        for rep in range(config.reps):
            key = (scenario, n, rep, mode, sampler)
            if key in done:
                continue
            row = run_one(scenario, n, rep, mode, sampler, config)
            log.info("%s n=%d rep=%d %s/%s: %s", scenario, n, rep, mode, sampler, row["status"])
            rows.append(row)
            with open(raw_path, "a", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, fieldnames=RAW_FIELDS).writerow({k: _fmt(row.get(k)) for k in RAW_FIELDS})
    agg = aggregate([{k: _fmt(r.get(k)) for k in RAW_FIELDS} for r in rows])
    write_rows(agg_path, AGG_FIELDS, agg)
    return agg


def loglog_slope(ns, seconds) -> float:
    """Least-squares slope of log(seconds) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(seconds, float)), 1)[0])
