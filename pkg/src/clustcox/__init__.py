"""Marginal Cox regression for clustered survival data with small-sample
bias-corrected sandwich variance estimators, plus a cluster randomized trial
simulator and Monte Carlo harness."""

from .data import RiskSums, Subject, TrialData, read_csv, risk_sums, validate, write_csv
from .coxfit import FitResult, breslow, fit, information, score
from .inference import TestResult, t_quantile, wald_test
from .simulate import Scenario, generate_trial
from .variance import LABELS, EstimatorKind, VarianceEstimate, corrected_scores, sandwich

__all__ = [
    "LABELS",
    "EstimatorKind",
    "FitResult",
    "RiskSums",
    "Scenario",
    "Subject",
    "TestResult",
    "TrialData",
    "VarianceEstimate",
    "breslow",
    "corrected_scores",
    "fit",
    "generate_trial",
    "information",
    "read_csv",
    "risk_sums",
    "sandwich",
    "score",
    "t_quantile",
    "validate",
    "wald_test",
    "write_csv",
]

__version__ = "0.1.0"
