"""Topic model with Markovian topic transitions for time-stamped event sequences."""

from .model import Corpus, EventSequence, LatentPath, ModelParams, VariationalState, validate_params
from .fit import FitConfig, FitReport, align_labels, elbo, fit, init_params

__all__ = [
    "Corpus",
    "EventSequence",
    "FitConfig",
    "FitReport",
    "LatentPath",
    "ModelParams",
    "VariationalState",
    "align_labels",
    "elbo",
    "fit",
    "init_params",
    "validate_params",
]
