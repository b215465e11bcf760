"""First stage, weights and weighted PH fit as one call."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ivcox import phfit
from ivcox.data import COMPETING_RISKS, CountingView, Dataset, build_counting_view, recode_cause
from ivcox.errors import InputError
from ivcox.phfit import FitOptions, PhFit
from ivcox.weights import DEFAULT_INTERVAL, METHODS, WeightSet, compute_weights


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "kappa_v_tr"
    design_policy: str = "second_order"
    interval: tuple[float, float] = DEFAULT_INTERVAL
    fit_options: FitOptions = field(default_factory=FitOptions)
    cause: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown weight method {self.method!r}")

    def with_(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["interval"] = list(self.interval)
        return d


@dataclass(frozen=True, eq=False)
class Estimate:
    dataset: Dataset
    view: CountingView
    weights: WeightSet
    fit: PhFit
    config: EstimatorConfig

    @property
    def beta(self) -> np.ndarray:
        return self.fit.beta


def analysis_data(dataset: Dataset, cause: int | None = None) -> Dataset:
    """The dataset the weights are built from.

    Competing-risks data are reduced to the cause of interest first, so the
    projection strata use the cause-specific event indicator.
    """
    if dataset.mode == COMPETING_RISKS:
        if cause is None:
            raise InputError("competing-risks mode needs a cause")
        return recode_cause(dataset, cause)
    if cause is not None:
        raise InputError("cause is only meaningful in competing-risks mode")
    return dataset


def estimate(dataset: Dataset, config: EstimatorConfig | None = None, oracle=None) -> Estimate:
    """Run the whole estimator.  Raises NoConvergence from the fit step."""
    config = config or EstimatorConfig()
    data = analysis_data(dataset, config.cause)
    view = build_counting_view(data)
    w = compute_weights(data, config.method, config.design_policy, config.interval, oracle=oracle)
    fit = phfit.fit(view, w, config.fit_options, method_tag=config.method)
    return Estimate(data, view, w, fit, config)
