"""Simulation and verification of extinction in the stochastic SIS epidemic SDE."""

from .ensemble import EnsembleConfig, EnsembleReport, PathSummary, aggregate, run_ensemble
from .model import (
    InvalidParameterError,
    ModelParams,
    RegimeReport,
    TheoremCase,
    classify,
    diffusion,
    drift,
    log_drift,
    r0s,
)
from .pathstats import PathRecord, slope_decomposition, slope_endpoint, slope_regression
from .sde import BrownianStream, Scheme, SchemeConfig, SchemeUnreliableError, simulate_path
from .verify import Verdict, check_identity, check_lemma, check_theorem, logistic_reference

__version__ = "0.1.0"
