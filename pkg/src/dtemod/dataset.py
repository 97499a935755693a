"""Observational datasets, synthetic benchmark generators and CSV I/O.

A :class:`Dataset` holds the observable triple ``(a, x, y)`` only. Generators
also return the potential outcomes through :class:`Simulation`, which tests
use as an oracle; estimators never see them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import toeplitz

CONTINUOUS = "continuous"
DISCRETE = "discrete"

SCENARIOS = ("LinMean", "NonlinMean", "LinVar", "NonlinVar", "LinCovar", "NonlinCovar", "Null")

# X_1..X_5 drive the potential outcomes in every non-null scenario (0-based).
TRUE_MODIFIERS = (0, 1, 2, 3, 4)


class DatasetError(ValueError):
    """Raised for malformed data or invalid generator arguments."""


@dataclass(frozen=True)
class Column:
    """Kind tag of one feature column.

    ``levels`` is the declared level set of a discrete column and ``None``
    for continuous columns.
    """

    name: str
    kind: str = CONTINUOUS
    levels: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise DatasetError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS and self.levels is not None:
            raise DatasetError(f"column {self.name!r}: continuous columns have no level set")
        if self.kind == DISCRETE:
            if not self.levels:
                raise DatasetError(f"column {self.name!r}: discrete column needs a level set")
            object.__setattr__(self, "levels", tuple(sorted(float(v) for v in set(self.levels))))

    @property
    def discrete(self) -> bool:
        return self.kind == DISCRETE

    def header(self) -> str:
        if self.discrete:
            return f"{self.name}:discrete[{'|'.join(_fmt(v) for v in self.levels)}]"
        return f"{self.name}:continuous"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class Dataset:
    """Immutable sample of ``n`` rows ``(a_i, x_i, y_i)``.

    Parameters
    ----------
    treatment : array-like of shape (n,)
        Binary treatment flags.
    features : array-like of shape (n, d)
    outcome : array-like of shape (n,)
    columns : sequence of Column or str, optional
        Per-feature kind tags; plain strings are continuous columns.
        Defaults to continuous columns named ``x1..xd``.
    """

    __slots__ = ("treatment", "features", "outcome", "columns", "treatment_name", "outcome_name")

    def __init__(
        self,
        treatment,
        features,
        outcome,
        columns: Sequence[Column | str] | None = None,
        *,
        treatment_name: str = "a",
        outcome_name: str = "y",
    ):
        a = np.asarray(treatment)
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(outcome, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if a.ndim != 1 or y.ndim != 1 or x.ndim != 2:
            raise DatasetError("treatment and outcome must be 1-d, features 2-d")
        n, d = x.shape
        if a.shape[0] != n or y.shape[0] != n:
            raise DatasetError(f"row count mismatch: a={a.shape[0]}, x={n}, y={y.shape[0]}")
        if n < 2:
            raise DatasetError("a dataset needs n >= 2 rows")
        if d < 1:
            raise DatasetError("a dataset needs d >= 1 features")
        if not np.all((a == 0) | (a == 1)):
            bad = np.unique(a[(a != 0) & (a != 1)])[:5]
            raise DatasetError(f"treatment must be binary 0/1, found {bad.tolist()}")
        if not np.all(np.isfinite(y)):
            raise DatasetError("outcome contains non-finite values")
        if not np.all(np.isfinite(x)):
            raise DatasetError("features contain non-finite values")

        if columns is None:
            columns = [f"x{j + 1}" for j in range(d)]
        cols = tuple(c if isinstance(c, Column) else Column(str(c)) for c in columns)
        if len(cols) != d:
            raise DatasetError(f"{len(cols)} column tags for {d} feature columns")
        names = [c.name for c in cols] + [treatment_name, outcome_name]
        if len(set(names)) != len(names):
            raise DatasetError(f"duplicate column names in {names}")
        for j, c in enumerate(cols):
            if c.discrete:
                stray = np.setdiff1d(np.unique(x[:, j]), np.asarray(c.levels))
                if stray.size:
                    raise DatasetError(
                        f"column {c.name!r}: values {stray[:5].tolist()} outside level set {list(c.levels)}"
                    )

        object.__setattr__(self, "treatment", _readonly(a.astype(np.int8)))
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "outcome", _readonly(y))
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "treatment_name", treatment_name)
        object.__setattr__(self, "outcome_name", outcome_name)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column(self, m: int) -> np.ndarray:
        return self.features[:, m]

    def is_discrete(self, m: int) -> bool:
        return self.columns[m].discrete

    def replace_column(self, m: int, values) -> "Dataset":
        """Copy of the dataset with feature ``m`` replaced by ``values``."""
        x = np.array(self.features, copy=True)
        x[:, m] = values
        return Dataset(
            self.treatment,
            x,
            self.outcome,
            self.columns,
            treatment_name=self.treatment_name,
            outcome_name=self.outcome_name,
        )

    def subset(self, columns: Sequence[int]) -> "Dataset":
        cols = list(columns)
        return Dataset(
            self.treatment,
            self.features[:, cols],
            self.outcome,
            [self.columns[j] for j in cols],
            treatment_name=self.treatment_name,
            outcome_name=self.outcome_name,
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.columns == other.columns
            and self.treatment_name == other.treatment_name
            and self.outcome_name == other.outcome_name
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.outcome, other.outcome)
        )

    __hash__ = None

    def __repr__(self):
        return f"Dataset(n={self.n}, d={self.d}, columns={list(self.names)})"


# ---------------------------------------------------------------------------
# Synthetic benchmark scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    d: int = 30
    mu: float = 0.2
    sigma: float = 0.2

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise DatasetError(f"unknown scenario {self.name!r}; expected one of {SCENARIOS}")
        if self.d < 5:
            raise DatasetError("scenarios need d >= 5 (outcomes depend on X1..X5)")
        if not -1.0 < self.sigma < 1.0:
            raise DatasetError("sigma must lie in (-1, 1)")

    @property
    def covariance(self) -> np.ndarray:
        return toeplitz(self.sigma ** np.arange(self.d))

    @property
    def true_set(self) -> tuple[int, ...]:
        return () if self.name == "Null" else TRUE_MODIFIERS


@dataclass(frozen=True)
class Simulation:
    """A generated dataset together with the quantities only a simulator knows."""

    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray
    propensity: Callable[[np.ndarray], np.ndarray] = field(repr=False)


def linear_index(x: np.ndarray) -> np.ndarray:
    return 4 * x[:, 0] + 2 * x[:, 1] + x[:, 2] + 2 * x[:, 3] + 4 * x[:, 4]


def nonlinear_index(x: np.ndarray) -> np.ndarray:
    x5 = x[:, :5]
    return np.sum((x5 - 0.5) ** 3, axis=1) + 3 * np.sum(x5, axis=1) - 6


def floor_one(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 1.0)


def true_propensity(scenario: Scenario) -> Callable[[np.ndarray], np.ndarray]:
    """P(A=1 | X=x) implied by the class-conditional Gaussians.

    With equal priors and shared covariance the log-odds are
    ``2 mu^T Sigma^{-1} x``.
    """
    beta = 2.0 * np.linalg.solve(scenario.covariance, np.full(scenario.d, scenario.mu))

    def e(x):
        return 1.0 / (1.0 + np.exp(-(np.asarray(x, dtype=np.float64) @ beta)))

    return e


def simulate(scenario: Scenario | str, n: int, seed: int) -> Simulation:
    if isinstance(scenario, str):
        scenario = Scenario(scenario)
    if n < 2:
        raise DatasetError("n must be >= 2")
    rng = np.random.default_rng(seed)
    d = scenario.d
    a = rng.binomial(1, 0.5, size=n)
    chol = np.linalg.cholesky(scenario.covariance)
    x = (2 * a - 1)[:, None] * scenario.mu + rng.standard_normal((n, d)) @ chol.T

    name = scenario.name
    e0 = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    if name in ("LinMean", "NonlinMean"):
        loc = linear_index(x) if name == "LinMean" else nonlinear_index(x)
        y0 = -loc + e0
        y1 = loc + e1
    elif name in ("LinVar", "NonlinVar"):
        idx = linear_index(x) if name == "LinVar" else nonlinear_index(x)
        y0 = -5.0 + e0
        y1 = floor_one(idx) * e1
    elif name in ("LinCovar", "NonlinCovar"):
        idx = linear_index(x) if name == "LinCovar" else nonlinear_index(x)
        rho = 1.0 - 1.0 / floor_one(idx)
        y0 = -5.0 + e0
        y1 = rho * e0 + np.sqrt(1.0 - rho**2) * e1
    else:  # Null: potential outcomes ignore X
        y0 = -5.0 + e0
        y1 = e1

    y = np.where(a == 1, y1, y0)
    cols = [f"x{j + 1}" for j in range(d)]
    return Simulation(Dataset(a, x, y, cols), y0, y1, true_propensity(scenario))


def generate_synthetic(scenario: Scenario | str, n: int, seed: int) -> Dataset:
    """Draw an observable dataset from one of the benchmark scenarios.

    ``A ~ Ber(0.5)``, ``X | A ~ N((2A-1) mu, Sigma)`` with
    ``Sigma_ij = sigma^|i-j|``, and ``Y = (1-A) Y0 + A Y1``.
    """
    return simulate(scenario, n, seed).dataset


# ---------------------------------------------------------------------------
# Discrete joint-table fixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointTable:
    """Conditional joint law P(Y0, Y1 | X) for a single discrete feature.

    ``probs[k, i, j] = P(Y0 = y_levels[i], Y1 = y_levels[j] | X = x_levels[k])``.
    """

    x_levels: tuple[float, ...]
    y_levels: tuple[float, ...]
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        k, ny = len(self.x_levels), len(self.y_levels)
        if p.shape != (k, ny, ny):
            raise DatasetError(f"table shape {p.shape} does not match ({k}, {ny}, {ny})")
        if np.any(p < 0):
            raise DatasetError("negative probability in joint table")
        sums = p.reshape(k, -1).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise DatasetError(f"per-x tables must sum to 1, got {sums.tolist()}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "x_levels", tuple(float(v) for v in self.x_levels))
        object.__setattr__(self, "y_levels", tuple(float(v) for v in self.y_levels))

    def marginals(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(P(Y0 | X=x_k), P(Y1 | X=x_k)) over ``y_levels``."""
        return self.probs[k].sum(axis=1), self.probs[k].sum(axis=0)


def _table(x0, x1) -> np.ndarray:
    return np.array([x0, x1], dtype=np.float64)


# Rows index Y0, columns Y1, levels (-1, 0, 1).
TABLE_EXAMPLE = JointTable(
    x_levels=(0, 1),
    y_levels=(-1, 0, 1),
    probs=_table(
        [[0, 0, 0], [0.5, 0, 0.5], [0, 0, 0]],
        [[0, 0, 0], [0, 1.0, 0], [0, 0, 0]],
    ),
)

# Equal conditional marginals at both levels, different couplings.
TABLE_COUNTEREXAMPLE = JointTable(
    x_levels=(0, 1),
    y_levels=(-1, 0, 1),
    probs=_table(
        [[0.5, 0, 0], [0, 0, 0], [0, 0, 0.5]],
        [[0, 0, 0.5], [0, 0, 0], [0.5, 0, 0]],
    ),
)


def simulate_from_table(table: JointTable, marginal_x, n: int, seed: int) -> Simulation:
    px = np.asarray(marginal_x, dtype=np.float64)
    if px.shape != (len(table.x_levels),):
        raise DatasetError("marginal_x must have one entry per x level")
    if np.any(px < 0) or abs(px.sum() - 1.0) > 1e-12:
        raise DatasetError("marginal_x must be a probability vector")
    if n < 2:
        raise DatasetError("n must be >= 2")
    rng = np.random.default_rng(seed)
    ny = len(table.y_levels)
    k = rng.choice(len(px), size=n, p=px)
    cdf = np.cumsum(table.probs.reshape(len(px), -1), axis=1)
    u = rng.random(n)
    cell = np.minimum((u[:, None] > cdf[k]).sum(axis=1), ny * ny - 1)
    levels = np.asarray(table.y_levels)
    y0, y1 = levels[cell // ny], levels[cell % ny]
    a = rng.binomial(1, 0.5, size=n)
    x = np.asarray(table.x_levels)[k]
    y = np.where(a == 1, y1, y0)
    ds = Dataset(a, x[:, None], y, [Column("x", DISCRETE, table.x_levels)])
    return Simulation(ds, y0, y1, lambda feats: np.full(np.asarray(feats).shape[0], 0.5))


def generate_from_table(table: JointTable, marginal_x, n: int, seed: int) -> Dataset:
    """Realise a joint-table fixture as observable data with ``A ~ Ber(0.5)``."""
    return simulate_from_table(table, marginal_x, n, seed).dataset


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _parse_header(token: str) -> tuple[str, str, tuple[float, ...] | None]:
    name, sep, tag = token.strip().partition(":")
    name = name.strip()
    if not name:
        raise DatasetError(f"empty column name in header token {token!r}")
    tag = tag.strip().lower() if sep else ""
    if tag in ("", CONTINUOUS, "treatment", "outcome"):
        return name, tag or CONTINUOUS, None
    if tag.startswith(DISCRETE):
        rest = tag[len(DISCRETE):]
        if not rest:
            return name, DISCRETE, None
        if not (rest.startswith("[") and rest.endswith("]")):
            raise DatasetError(f"bad level set in header token {token!r}")
        try:
            levels = tuple(float(v) for v in rest[1:-1].split("|") if v.strip())
        except ValueError as exc:
            raise DatasetError(f"bad level set in header token {token!r}") from exc
        return name, DISCRETE, levels
    raise DatasetError(f"unknown column kind {tag!r} in header token {token!r}")


def load_csv(
    path,
    *,
    treatment: str | None = None,
    outcome: str | None = None,
    discrete: Sequence[str] = (),
) -> Dataset:
    """Read a dataset from CSV.

    Header tokens take the form ``name:kind`` where kind is one of
    ``treatment``, ``outcome``, ``continuous``, ``discrete`` or
    ``discrete[l1|l2|...]``. Untagged columns are continuous features. The
    keyword arguments override header tags by column name.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [_parse_header(tok) for tok in rows[0]]
    names = [h[0] for h in header]
    if len(set(names)) != len(names):
        raise DatasetError(f"{path}: duplicate column names")
    kinds = {name: kind for name, kind, _ in header}
    levels = {name: lv for name, _, lv in header}
    if treatment is not None:
        kinds = {k: (CONTINUOUS if v == "treatment" else v) for k, v in kinds.items()}
        kinds[treatment] = "treatment"
    if outcome is not None:
        kinds = {k: (CONTINUOUS if v == "outcome" else v) for k, v in kinds.items()}
        kinds[outcome] = "outcome"
    for name in discrete:
        kinds[name] = DISCRETE
    for name in [treatment, outcome, *discrete]:
        if name is not None and name not in names:
            raise DatasetError(f"{path}: no column named {name!r}")
    t_cols = [c for c in names if kinds[c] == "treatment"]
    o_cols = [c for c in names if kinds[c] == "outcome"]
    if len(t_cols) != 1 or len(o_cols) != 1:
        raise DatasetError(f"{path}: need exactly one treatment and one outcome column, got {t_cols} / {o_cols}")

    body = rows[1:]
    width = len(names)
    values = np.empty((len(body), width), dtype=np.float64)
    for i, row in enumerate(body, start=2):
        if len(row) != width:
            raise DatasetError(f"{path}:{i}: expected {width} cells, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[i - 2, j] = float(cell)
            except ValueError as exc:
                raise DatasetError(f"{path}:{i}: cannot parse {cell!r} in column {names[j]!r}") from exc

    feat_names = [c for c in names if kinds[c] not in ("treatment", "outcome")]
    idx = {c: j for j, c in enumerate(names)}
    cols = []
    for c in feat_names:
        if kinds[c] == DISCRETE:
            lv = levels.get(c) or tuple(np.unique(values[:, idx[c]]).tolist())
            cols.append(Column(c, DISCRETE, lv))
        else:
            cols.append(Column(c))
    if not cols:
        raise DatasetError(f"{path}: no feature columns")
    return Dataset(
        values[:, idx[t_cols[0]]],
        values[:, [idx[c] for c in feat_names]],
        values[:, idx[o_cols[0]]],
        cols,
        treatment_name=t_cols[0],
        outcome_name=o_cols[0],
    )


def save_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` as CSV with kind-tagged headers (full float precision)."""
    path = Path(path)
    header = [f"{dataset.treatment_name}:treatment"]
    header += [c.header() for c in dataset.columns]
    header.append(f"{dataset.outcome_name}:outcome")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, x, y in zip(dataset.treatment, dataset.features, dataset.outcome):
            w.writerow([str(int(a)), *(repr(float(v)) for v in x), repr(float(y))])


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.json")


def write_manifest(csv_path, **info) -> Path:
    out = manifest_path(csv_path)
    out.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(csv_path) -> dict | None:
    p = manifest_path(csv_path)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))
