"""Margins/dependence sensitivity toolkit for spatial extremes."""
from ._backend import BACKEND
from .cse import CseConfig, CseFit, CseParams, composite_nll, fit_cse, simulate_cse
from .data import CovariateTable, SiteSet, SpatioTemporalField, load_covariates, load_field, write_field
from .dependence import pairwise_dependence, period_difference, site_averages
from .pipelines import DetrendedField, run_pipeline
from .synthetic import SyntheticSpec, gen_field

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CovariateTable",
    "CseConfig",
    "CseFit",
    "CseParams",
    "DetrendedField",
    "SiteSet",
    "SpatioTemporalField",
    "SyntheticSpec",
    "composite_nll",
    "fit_cse",
    "gen_field",
    "load_covariates",
    "load_field",
    "pairwise_dependence",
    "period_difference",
    "run_pipeline",
    "simulate_cse",
    "site_averages",
    "write_field",
    "__version__",
]
