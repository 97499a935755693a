"""Selection of distributional treatment effect modifiers.

Features are scored by how much the kernel distance between the two
conditional potential-outcome distributions varies with the feature, and
tested with a conditional randomization test followed by Benjamini-Hochberg.
"""

from .crt import CrtResult, crt_pvalue, fit_sampler, resample_feature
from .dataset import Dataset, Scenario, generate_synthetic, load_csv, save_csv, simulate
from .propensity import PropensityConfig, fit_propensity, ipw_weights, oracle_weights
from .selection import SelectionConfig, SelectionResult, bh_adjust, evaluate_tpr_fpr, select
from .wcmmd import ImportanceConfig, WCMMDEstimator, importance

__version__ = "0.1.0"

__all__ = [
    "CrtResult",
    "Dataset",
    "ImportanceConfig",
    "PropensityConfig",
    "Scenario",
    "SelectionConfig",
    "SelectionResult",
    "WCMMDEstimator",
    "bh_adjust",
    "crt_pvalue",
    "evaluate_tpr_fpr",
    "fit_propensity",
    "fit_sampler",
    "generate_synthetic",
    "importance",
    "ipw_weights",
    "load_csv",
    "oracle_weights",
    "resample_feature",
    "save_csv",
    "select",
    "simulate",
]
