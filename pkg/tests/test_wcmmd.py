import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtemod.crt import crt_pvalue, fit_sampler
from dtemod.dataset import (
    DISCRETE,
    TABLE_COUNTEREXAMPLE,
    TABLE_EXAMPLE,
    Column,
    Dataset,
    JointTable,
    generate_from_table,
    simulate,
)
from dtemod.kernels import gaussian_kernel, make_rff
from dtemod.propensity import IPWeights, oracle_weights
from dtemod.wcmmd import (
    ConditionalWeights,
    EmptyStratumError,
    ImportanceConfig,
    WCMMDEstimator,
    cate_variance_statistic,
    conditional_weights_continuous,
    conditional_weights_discrete,
    d2_exact,
    d2_rff,
    importance,
    normalize_arms,
)

TABLE_D2 = 1.5 + 0.5 * math.exp(-4) - 2 * math.exp(-1)


def _brute_force_d2(y, omega0, omega1, h):
    total = 0.0
    for i in range(len(y)):
        for j in range(len(y)):
            k = gaussian_kernel(y[i], y[j], h)
            total += (omega0[i] * omega0[j] + omega1[i] * omega1[j] - 2 * omega0[i] * omega1[j]) * k
    return total


def _tiny(n, seed):
    rng = np.random.default_rng(seed)
    a = np.r_[0, 1, rng.binomial(1, 0.5, n - 2)]
    return Dataset(a, rng.normal(size=(n, 2)), rng.normal(size=n))


class TestConditionalWeights:
    def test_discrete_hand_example(self):
        ds = Dataset([1, 1, 0, 0], [[0.0], [0.0], [1.0], [1.0]], [0, 0, 0, 0], [Column("g", DISCRETE, (0, 1))])
        ipw = IPWeights(np.array([0.0, 0, 2, 2]), np.array([2.0, 2, 0, 0]))
        w = conditional_weights_discrete(ds, 0, 0.0, ipw)
        np.testing.assert_array_equal(w.omega1, [1, 1, 0, 0])
        np.testing.assert_array_equal(w.omega0, [0, 0, 0, 0])

    def test_discrete_all_match_reduces_to_ipw_over_n(self):
        ds = _tiny(6, 0).replace_column(0, np.zeros(6))
        ipw = oracle_weights(ds, 0.3)
        w = conditional_weights_discrete(ds, 0, 0.0, ipw)
        np.testing.assert_allclose(w.omega1, ipw.w1 / 6)

    def test_empty_stratum(self):
        ds = _tiny(5, 1)
        with pytest.raises(EmptyStratumError, match="empty stratum"):
            conditional_weights_discrete(ds, 0, 123.0, oracle_weights(ds, 0.5))

    def test_continuous_flat_limit(self):
        ds = _tiny(8, 2)
        ipw = oracle_weights(ds, 0.5)
        w = conditional_weights_continuous(ds, 0, 0.3, ipw, 1e6)
        np.testing.assert_allclose(w.omega0, ipw.w0 / 8, atol=1e-6)

    def test_continuous_far_row_vanishes(self):
        h = 0.5
        ds = Dataset([1, 1], [[0.0], [100 * h]], [0.0, 1.0])
        w = conditional_weights_continuous(ds, 0, 0.0, oracle_weights(ds, 0.5), h)
        assert w.omega1[1] < 1e-40 * w.omega1[0]

    def test_continuous_linear_in_ipw(self):
        ds = _tiny(7, 3)
        ipw = oracle_weights(ds, 0.4)
        doubled = IPWeights(2 * ipw.w0, 2 * ipw.w1)
        a = conditional_weights_continuous(ds, 1, 0.1, ipw, 0.7)
        b = conditional_weights_continuous(ds, 1, 0.1, doubled, 0.7)
        np.testing.assert_allclose(b.omega0, 2 * a.omega0)

    def test_continuous_underflow_falls_back(self):
        ds = Dataset([1, 0], [[0.0], [1.0]], [0.0, 1.0])
        w = conditional_weights_continuous(ds, 0, 1e4, oracle_weights(ds, 0.5), 1e-3)
        assert np.all(np.isfinite(w.omega0)) and w.omega0[1] > 0


class TestPointwise:
    def test_identical_weights_give_zero(self):
        ds = _tiny(6, 4)
        omega = np.full(6, 1 / 6)
        w = ConditionalWeights(omega, omega.copy(), 0, 0.0)
        assert d2_exact(ds, w, 1.0) == pytest.approx(0.0, abs=1e-15)
        assert d2_rff(ds, w, make_rff(1.0, 100, 0)) == 0.0

    def test_two_row_hand_value(self):
        ds = Dataset([0, 1], [[0.0], [1.0]], [0.0, 1.0])
        w = ConditionalWeights(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0, 0.0)
        assert d2_exact(ds, w, 1.0) == pytest.approx(2 - 2 * math.exp(-1), abs=1e-12)
        assert d2_rff(ds, w, make_rff(1.0, 20000, 1)) == pytest.approx(2 - 2 * math.exp(-1), abs=0.05)

    @pytest.mark.parametrize("seed", range(8))
    def test_exact_matches_brute_force_double_sum(self, seed):
        n = 4 + seed
        ds = _tiny(n, seed)
        rng = np.random.default_rng(100 + seed)
        ipw = oracle_weights(ds, rng.uniform(0.2, 0.8))
        w = conditional_weights_continuous(ds, 0, rng.normal(), ipw, rng.uniform(0.3, 2))
        expected = _brute_force_d2(ds.outcome, w.omega0, w.omega1, 0.9)
        assert d2_exact(ds, w, 0.9) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_tied_outcomes_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = 12
        ds = Dataset(np.r_[0, 1, rng.binomial(1, 0.5, n - 2)], rng.normal(size=(n, 1)), rng.integers(-1, 2, n))
        ipw = oracle_weights(ds, 0.4)
        est = WCMMDEstimator(ds.outcome, ipw, "exact", h_y=0.8)
        curve = est.curve(ds.column(0), h_x=0.5)
        for i in range(n):
            w = conditional_weights_continuous(ds, 0, ds.column(0)[i], ipw, 0.5)
            expected = _brute_force_d2(ds.outcome, w.omega0, w.omega1, 0.8)
            assert d2_exact(ds, w, 0.8) == pytest.approx(expected, abs=1e-12)
            assert curve[i] == pytest.approx(expected, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative_for_random_weights(self, seed):
        rng = np.random.default_rng(seed)
        ds = _tiny(10, seed)
        w = ConditionalWeights(rng.uniform(0, 1, 10), rng.uniform(0, 1, 10), 0, 0.0)
        assert d2_exact(ds, w, rng.uniform(0.1, 3)) >= 0
        assert d2_rff(ds, w, make_rff(1.0, 50, seed)) >= 0

    def test_rff_error_shrinks_with_r(self):
        rng = np.random.default_rng(5)
        ds = _tiny(40, 5)
        weightings = [ConditionalWeights(rng.uniform(0, 0.1, 40), rng.uniform(0, 0.1, 40), 0, 0.0) for _ in range(50)]
        errors = []
        for r in (250, 1000, 4000, 16000):
            errs = [abs(d2_rff(ds, w, make_rff(1.0, r, 17)) - d2_exact(ds, w, 1.0)) for w in weightings]
            errors.append(np.median(errs))
        assert all(b <= a for a, b in zip(errors, errors[1:]))
        # O(r^-1/2): a 64-fold increase in r should cut the error by roughly 8
        assert errors[-1] < errors[0] / 3


class TestTableFixture:
    def test_closed_form_value(self):
        p0 = np.array([0, 1.0, 0])
        p1 = np.array([0.5, 0, 0.5])
        y = np.array([-1.0, 0, 1])
        k = np.exp(-np.subtract.outer(y, y) ** 2)
        assert (p0 - p1) @ k @ (p0 - p1) == pytest.approx(TABLE_D2, abs=1e-12)

    def test_consistency_in_n(self):
        medians = []
        for n in (500, 2000, 8000):
            errs = []
            for seed in range(20):
                ds = generate_from_table(TABLE_EXAMPLE, [0.5, 0.5], n, seed)
                w = conditional_weights_discrete(ds, 0, 0.0, oracle_weights(ds, 0.5))
                errs.append(abs(d2_exact(ds, w, 1.0) - TABLE_D2))
            medians.append(np.median(errs))
        assert medians[0] > medians[1] > medians[2]

    def test_importance_population_analogue(self):
        ds = generate_from_table(TABLE_EXAMPLE, [0.5, 0.5], 20000, 3)
        ipw = oracle_weights(ds, 0.5)
        res = importance(ds, 0, ipw, ImportanceConfig(mode="exact", h_y=1.0))
        assert res.importance == pytest.approx(TABLE_D2**2 / 4, rel=0.1)
        levels = dict(res.curve.points)
        assert levels[1.0] < 0.02

    def test_cate_statistic_is_blind_to_table_example(self):
        ds = generate_from_table(TABLE_EXAMPLE, [0.5, 0.5], 20000, 4)
        assert cate_variance_statistic(ds, 0, oracle_weights(ds, 0.5)) < 0.01


def test_proposition_one_confounded_fixture():
    """Known confounded assignment; oracle weights recover the randomized limit."""
    n = 40000
    rng = np.random.default_rng(6)
    x = rng.binomial(1, 0.5, n).astype(float)
    z = rng.binomial(1, 0.5, n).astype(float)  # confounder
    e = np.where(z == 1, 0.8, 0.2)
    a = rng.binomial(1, e)
    y0 = rng.normal(z, 1.0)
    y1 = rng.normal(z + 1.0 + x, 1.0)
    y = np.where(a == 1, y1, y0)
    ds = Dataset(a, np.column_stack([x, z]), y, [Column("x", DISCRETE, (0, 1)), Column("z", DISCRETE, (0, 1))])
    ipw = oracle_weights(ds, lambda f: np.where(f[:, 1] == 1, 0.8, 0.2))
    for level in (0.0, 1.0):
        rows = x == level
        # randomized limit from the potential outcomes at this level, via a large independent draw
        zz = rng.binomial(1, 0.5, 4000)
        u0 = rng.normal(zz, 1.0)
        u1 = rng.normal(zz + 1.0 + level, 1.0)
        half = np.r_[np.full(4000, 1 / 4000), np.full(4000, -1 / 4000)]
        pts = np.r_[u0, u1]
        limit = half @ np.exp(-np.subtract.outer(pts, pts) ** 2) @ half
        est = d2_exact(ds, conditional_weights_discrete(ds, 0, level, ipw), 1.0)
        naive_w = conditional_weights_discrete(ds, 0, level, oracle_weights(ds, 0.5))
        naive = d2_exact(ds, naive_w, 1.0)
        assert est == pytest.approx(limit, abs=0.02)
        assert abs(naive - limit) > 0.02 or rows.sum() == 0


def test_equal_joint_tables_give_no_signal():
    same = np.stack([TABLE_COUNTEREXAMPLE.probs[0]] * 2)
    table = JointTable((0, 1), (-1, 0, 1), same)
    ds = generate_from_table(table, [0.5, 0.5], 8000, 7)
    ipw = oracle_weights(ds, 0.5)
    est = WCMMDEstimator.from_dataset(ds, ipw, ImportanceConfig(mode="exact", h_y=1.0))

    def stat(d):
        return est.importance(d.column(0), discrete=True)

    res = crt_pvalue(ds, 0, stat, fit_sampler(ds, 0), B=100, seed=1)
    assert res.observed <= np.quantile(res.null, 0.95)


def test_counterexample_is_invisible_to_the_statistic():
    ds = generate_from_table(TABLE_COUNTEREXAMPLE, [0.5, 0.5], 8000, 8)
    res = importance(ds, 0, oracle_weights(ds, 0.5), ImportanceConfig(mode="exact", h_y=1.0))
    assert res.importance < 1e-3


class TestImportance:
    def test_constant_column(self):
        ds = _tiny(20, 9).replace_column(1, np.full(20, 3.0))
        with pytest.warns(UserWarning, match="single value"):
            res = importance(ds, 1, oracle_weights(ds, 0.5), ImportanceConfig(h_y=1.0, h_x=[1.0, None]))
        assert res.importance == 0.0 and res.degenerate

    def test_curve_matches_pointwise(self):
        sim = simulate("LinVar", 120, 3)
        ds = sim.dataset
        ipw = oracle_weights(ds, sim.propensity)
        cfg = ImportanceConfig(mode="exact")
        bw = cfg.bandwidths(ds)
        res = importance(ds, 2, ipw, cfg, bw)
        for i in range(0, 120, 17):
            w = conditional_weights_continuous(ds, 2, ds.column(2)[i], ipw, bw.h_x[2])
            assert res.curve.d2[i] == pytest.approx(d2_exact(ds, w, bw.h_y), rel=1e-10, abs=1e-14)
        assert res.importance == pytest.approx(np.var(res.curve.d2, ddof=1))

    def test_normalized_curve_matches_pointwise(self):
        sim = simulate("LinVar", 120, 4)
        ds = sim.dataset
        ipw = oracle_weights(ds, sim.propensity)
        cfg = ImportanceConfig(mode="exact", normalize=True)
        bw = cfg.bandwidths(ds)
        curve = importance(ds, 0, ipw, cfg, bw).curve.d2
        for i in range(0, 120, 23):
            w = normalize_arms(conditional_weights_continuous(ds, 0, ds.column(0)[i], ipw, bw.h_x[0]))
            assert np.isclose(w.omega0.sum(), 1) and np.isclose(w.omega1.sum(), 1)
            assert curve[i] == pytest.approx(d2_exact(ds, w, bw.h_y), rel=1e-10, abs=1e-14)

    def test_discrete_levels_are_broadcast(self):
        ds = generate_from_table(TABLE_EXAMPLE, [0.3, 0.7], 500, 2)
        ipw = oracle_weights(ds, 0.5)
        res = importance(ds, 0, ipw, ImportanceConfig(mode="exact", h_y=1.0))
        for level in (0.0, 1.0):
            w = conditional_weights_discrete(ds, 0, level, ipw)
            vals = res.curve.d2[ds.column(0) == level]
            assert np.allclose(vals, d2_exact(ds, w, 1.0), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_fast_path_matches_direct(self, normalize):
        sim = simulate("LinMean", 600, 5)
        ds = sim.dataset
        ipw = oracle_weights(ds, sim.propensity)
        cfg = ImportanceConfig(r=300, normalize=normalize)
        bw = cfg.bandwidths(ds)
        direct = WCMMDEstimator.from_dataset(ds, ipw, cfg, bw.h_y)
        fast = WCMMDEstimator.from_dataset(ds, ipw, ImportanceConfig(r=300, normalize=normalize, lowrank_tol=1e-12), bw.h_y)
        assert fast.embedding_rank < 300
        for m in (0, 7):
            a = direct.curve(ds.column(m), h_x=bw.h_x[m])
            b = fast.curve(ds.column(m), h_x=bw.h_x[m])
            assert np.max(np.abs(a - b)) <= 1e-9 * np.max(a)

    def test_rff_close_to_exact(self):
        sim = simulate("LinVar", 300, 6)
        ds = sim.dataset
        ipw = oracle_weights(ds, sim.propensity)
        bw = ImportanceConfig().bandwidths(ds)
        exact = importance(ds, 0, ipw, ImportanceConfig(mode="exact"), bw).importance
        approx = importance(ds, 0, ipw, ImportanceConfig(r=4000, seed=2), bw).importance
        assert approx == pytest.approx(exact, rel=0.1)

    def test_json_payload(self):
        ds = generate_from_table(TABLE_EXAMPLE, [0.5, 0.5], 50, 1)
        res = importance(ds, 0, oracle_weights(ds, 0.5), ImportanceConfig(h_y=1.0, r=50))
        payload = res.to_dict()
        assert payload["m"] == 0 and len(payload["curve"]) == 50

    def test_bandwidth_overrides(self):
        ds = _tiny(30, 3)
        bw = ImportanceConfig(h_y=2.0, h_x={1: 0.25}).bandwidths(ds)
        assert bw.h_y == 2.0 and bw.h_x[1] == 0.25 and bw.h_x[0] > 0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ImportanceConfig(mode="fast")


def test_cate_statistic_ranks_mean_modifier_first():
    wins = 0
    for seed in range(10):
        sim = simulate("LinMean", 2000, 40 + seed)
        ipw = oracle_weights(sim.dataset, sim.propensity)
        wins += cate_variance_statistic(sim.dataset, 0, ipw) > cate_variance_statistic(sim.dataset, 9, ipw)
    assert wins >= 9


def test_negative_roundoff_is_clamped_but_large_negatives_raise():
    from dtemod.wcmmd import _clamp_nonneg

    assert _clamp_nonneg(np.array([-5e-11]))[0] == 0.0
    with pytest.raises(FloatingPointError):
        _clamp_nonneg(np.array([-1e-6]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _clamp_nonneg(np.array([0.0, 1.0]))
