"""Causal effect estimation for many simultaneous causes.

Fits covariate-augmented probabilistic latent factor models by Gibbs
sampling, derives a substitute for unobserved multi-cause confounders,
validates the model with posterior predictive checks, and estimates
average causal effects through a residualized outcome regression. A
semi-synthetic benchmark compares the approach against baseline
adjustments under a controlled variance split between causal signal,
confounding, and noise.
"""

from .data import (
    ColumnScaling,
    Dataset,
    HoldoutMask,
    MaskedMatrix,
    load_dataset,
    normalize_by_tiv,
    save_dataset,
    split_holdout,
    standardize,
)
from .errors import ConfigError, DataError, DeconfoundError, GateError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "ColumnScaling",
    "Dataset",
    "HoldoutMask",
    "MaskedMatrix",
    "load_dataset",
    "normalize_by_tiv",
    "save_dataset",
    "split_holdout",
    "standardize",
    "ConfigError",
    "DataError",
    "DeconfoundError",
    "GateError",
    "NumericalError",
    "__version__",
]
