"""Cross-fitted estimation of the ATT under a multiplicative instrumental variable model."""

from .baselines import eif_substitution_estimate, tsls_estimate, wald_estimate
from .data import Dataset, FoldPlan, make_fold_plan, validate
from .estimator import EstimateReport, RunConfig, cross_fit, eif_evaluate, mivhr_test
from .simulation import GlimParams, OracleSurfaces, generate_dgp4, generate_glim, oracle_att, run_replications

__all__ = [
    "Dataset",
    "EstimateReport",
    "FoldPlan",
    "GlimParams",
    "OracleSurfaces",
    "RunConfig",
    "cross_fit",
    "eif_evaluate",
    "eif_substitution_estimate",
    "generate_dgp4",
    "generate_glim",
    "make_fold_plan",
    "mivhr_test",
    "oracle_att",
    "run_replications",
    "tsls_estimate",
    "validate",
    "wald_estimate",
]

__version__ = "0.1.0"
