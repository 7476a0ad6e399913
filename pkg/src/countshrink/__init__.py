"""Shrinkage estimation and multiple testing for sparse Poisson counts.

The core model places a gamma-Gauss-hypergeometric prior on each Poisson
rate; the posterior shrinkage weight kappa then follows a Gauss
hypergeometric distribution whose moments are ratios of Euler integrals.
"""
__version__ = "0.1.0"

from .data import CountDataset, DataError, as_dataset, ingest_csv
from .ebfit import BoundaryWarning, FitConfig, FitResult, fit, fit_shrink, shrink
from .estimators import (
    NPMLESolution,
    TwoGroupsParams,
    fit_zip,
    global_gamma,
    horseshoe,
    kw_npmle,
    kw_posterior_mean,
    kw_weight,
    robbins,
    zip_bayes,
)
from .gh import (
    TAU_MIN,
    GHParams,
    ShrinkageResult,
    marginal_log_pmf,
    posterior_kappa_moment,
    posterior_theta_mean,
    shrinkage,
)
from .multitest import TestDecision, confusion, decide, kw_decide, two_means_threshold
from .specfun import ConvergenceError, DomainError, EvalControl

__all__ = [
    "BoundaryWarning",
    "ConvergenceError",
    "CountDataset",
    "DataError",
    "DomainError",
    "EvalControl",
    "FitConfig",
    "FitResult",
    "GHParams",
    "NPMLESolution",
    "ShrinkageResult",
    "TAU_MIN",
    "TestDecision",
    "TwoGroupsParams",
    "as_dataset",
    "confusion",
    "decide",
    "fit",
    "fit_shrink",
    "fit_zip",
    "global_gamma",
    "horseshoe",
    "ingest_csv",
    "kw_decide",
    "kw_npmle",
    "kw_posterior_mean",
    "kw_weight",
    "marginal_log_pmf",
    "posterior_kappa_moment",
    "posterior_theta_mean",
    "robbins",
    "shrink",
    "shrinkage",
    "two_means_threshold",
    "zip_bayes",
]
