"""Shared Monte-Carlo routines for the CRT calibration checks."""

import numpy as np

from dtemod._seeding import derive_seed, rng_for
from dtemod.crt import crt_pvalue, fit_sampler
from dtemod.dataset import Scenario, simulate
from dtemod.propensity import oracle_weights
from dtemod.wcmmd import ImportanceConfig, WCMMDEstimator


def null_counts(reps, *, n=200, d=5, B=100, m=0, seed=0, dummy=False, mu=0.2):
    """Exceedance counts ``#{null >= observed}`` over independent global-null datasets.

    With ``dummy`` the tested column is first replaced by a draw from the
    fitted sampler, so the observed column is exchangeable with the null
    draws by construction.
    """
    counts = []
    for rep in range(reps):
        sim = simulate(Scenario("Null", d=d, mu=mu), n, derive_seed(seed, "null", rep))
        ds = sim.dataset
        if dummy:
            sampler = fit_sampler(ds, m)
            ds = ds.replace_column(m, sampler.sample(ds.features, rng_for(seed, "dummy", rep)))
        ipw = oracle_weights(ds, sim.propensity)
        cfg = ImportanceConfig(r=200, seed=rep, lowrank_tol=1e-10, normalize=True)
        bw = cfg.bandwidths(ds)
        est = WCMMDEstimator.from_dataset(ds, ipw, cfg, bw.h_y)
        h_x = bw.h_x[m]

        def stat(data):
            return est.importance(data.column(m), h_x=h_x)

        res = crt_pvalue(ds, m, stat, fit_sampler(ds, m), B, derive_seed(seed, "crt", rep))
        counts.append(int(round(res.pvalue * B)))
    return np.array(counts)


def randomized_uniform(counts, B, seed=0):
    """Map grid counts to exact U(0,1) draws by spreading each atom over its cell."""
    u = np.random.default_rng(seed).random(len(counts))
    return (np.asarray(counts) + u) / (B + 1)
