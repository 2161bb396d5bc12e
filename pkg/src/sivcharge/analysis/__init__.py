"""Fits and summary statistics for synthetic photon-count data."""

from .estimators import ExponentialDecay, FitError, FitResult, LorentzianLine
from .fits import fit_exponential, fit_lorentzian, window_bins
from .summary import (
    InconsistentSweepError,
    RecoveryPoint,
    SweepRun,
    SweepTable,
    normalized_recovery,
    recovery_point,
    sweep_summary,
)

__all__ = [
    "ExponentialDecay",
    "LorentzianLine",
    "FitError",
    "FitResult",
    "fit_exponential",
    "fit_lorentzian",
    "window_bins",
    "normalized_recovery",
    "RecoveryPoint",
    "recovery_point",
    "SweepRun",
    "SweepTable",
    "sweep_summary",
    "InconsistentSweepError",
]
