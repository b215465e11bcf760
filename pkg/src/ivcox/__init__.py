"""Complier causal hazard ratios from a binary instrument.

Weighted Cox partial-likelihood estimation with signed, projected and
truncated complier weights, their standard errors, and a simulation harness.
"""

__version__ = "0.1.0"

from ivcox.data import Dataset, build_counting_view, check, validate  # noqa: E402
from ivcox.phfit import FitOptions, PhFit, fit  # noqa: E402
from ivcox.pipeline import EstimatorConfig, estimate  # noqa: E402
from ivcox.weights import WeightSet, compute_weights  # noqa: E402

__all__ = ["Dataset", "build_counting_view", "check", "validate", "FitOptions", "PhFit", "fit",
           "EstimatorConfig", "estimate", "WeightSet", "compute_weights", "__version__"]
