"""Complier weights.

``kappa`` is the signed Abadie weight built from the instrument propensity,
``kappa_v`` its projection onto (W, delta, D, X) estimated by logistic
regression within the four (delta, D) strata, and ``kappa_v_tr`` the
projection clamped into a closed sub-interval of (0, 1).  ``unit`` and
``oracle`` (true complier indicator, simulation only) serve as benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ivcox.data import Dataset, projection_outcome
from ivcox.errors import (DegeneratePropensity, InputError, NumericError,
                          StratumTooSmall)
from ivcox.firststage import (PROB_CLAMP, DesignSpec, LogisticFit,
                              fit_logistic, fit_propensity)

METHODS = ("kappa", "kappa_v", "kappa_v_tr", "unit", "oracle")
DESIGN_POLICIES = ("second_order", "first_order", "interaction_only", "marginal")
DEFAULT_INTERVAL = (0.01, 0.99)


@dataclass(frozen=True)
class StratumFit:
    """Projection model for one (delta, D) stratum.

    ``fit`` is None when the stratum fell back to the constant ``mean``.
    """

    stratum: tuple[int, int]
    fit: LogisticFit | None
    policy: str
    size: int
    mean: float
    note: str = ""

    def predict(self, raw) -> np.ndarray:
        if self.fit is None:
            return np.full(np.asarray(raw).shape[0], self.mean)
        return self.fit.predict(raw)

    @property
    def n_coef(self) -> int:
        return 0 if self.fit is None else int(self.fit.alpha.shape[0])


@dataclass(frozen=True, eq=False)
class WeightSet:
    values: np.ndarray
    method: str
    propensity_fit: LogisticFit | None = None
    projection_fits: dict | None = None
    truncation_interval: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.method not in METHODS:
            raise InputError(f"unknown weight method {self.method!r}")

    def __len__(self):
        return self.values.shape[0]

    @property
    def signed(self) -> bool:
        return bool(np.any(self.values < 0))

    def scaled(self, c: float) -> "WeightSet":
        return WeightSet(c * self.values, self.method, self.propensity_fit, self.projection_fits,
                         self.truncation_interval, dict(self.diagnostics))


def _propensity_raw(dataset: Dataset) -> np.ndarray:
    return dataset.covariates


def _kappa_formula(D, v, psi):
    return 1.0 - D * (1.0 - v) / (1.0 - psi) - (1.0 - D) * v / psi


def _check_psi(psi):
    bad = (psi <= PROB_CLAMP) | (psi >= 1.0 - PROB_CLAMP)
    if np.any(bad):
        raise DegeneratePropensity(
            f"{int(bad.sum())} propensities at the clamp bounds; instrument positivity fails")


def propensity(propensity_fit: LogisticFit, dataset: Dataset) -> np.ndarray:
    return propensity_fit.predict(_propensity_raw(dataset))


def kappa_hat(propensity_fit: LogisticFit, dataset: Dataset) -> WeightSet:
    psi = propensity(propensity_fit, dataset)
    _check_psi(psi)
    D = dataset.treatment.astype(float)
    V = dataset.instrument.astype(float)
    return WeightSet(_kappa_formula(D, V, psi), "kappa", propensity_fit=propensity_fit)


def _projection_raw(dataset: Dataset) -> np.ndarray:
    w, _ = projection_outcome(dataset)
    return np.column_stack([w, dataset.covariates])


def _min_size(n_coef):
    return max(10, 2 * n_coef)


def _fit_stratum(stratum, V, raw, policy):
    size = int(V.shape[0])
    mean = float(V.mean()) if size else float("nan")
    spec = DesignSpec.for_data(policy, raw) if size else DesignSpec(policy, raw.shape[1])
    design = spec.build(raw)
    if size < _min_size(design.shape[1]) or size == 0 or np.all(V == V[0]):
        raise StratumTooSmall(f"stratum {stratum}: {size} records, "
                              f"{len(np.unique(V))} outcome class(es), {design.shape[1]} coefficients")
    fit = fit_logistic(V, design, design_spec=spec)
    return StratumFit(stratum, fit, policy, size, mean)


def fit_projection(dataset: Dataset, design_policy: str = "second_order", fallback: bool = True) -> dict:
    """Logistic fits of V on (W, X) terms within each (delta, D) stratum.

    With ``fallback`` a stratum that is too small, separated or singular is
    refitted with first-order regressors, then replaced by its empirical
    mean of V; the reason is kept in ``StratumFit.note``.  Without it the
    first failure propagates.
    """
    if design_policy not in DESIGN_POLICIES:
        raise InputError(f"unknown design policy {design_policy!r}")
    _, delta = projection_outcome(dataset)
    D = dataset.treatment
    V = dataset.instrument.astype(float)
    raw = _projection_raw(dataset)
    overall = float(V.mean()) if V.size else 0.5
    fits = {}
    for c in (0, 1):
        for d in (0, 1):
            mask = (delta == c) & (D == d)
            Vs, Xs = V[mask], raw[mask]
            try:
                fits[(c, d)] = _fit_stratum((c, d), Vs, Xs, design_policy)
                continue
            except NumericError as exc:
                if not fallback:
                    raise
                first_err = exc
            note = f"{design_policy} failed ({first_err.code})"
            if design_policy != "first_order":
                try:
                    sf = _fit_stratum((c, d), Vs, Xs, "first_order")
                    fits[(c, d)] = StratumFit(sf.stratum, sf.fit, "first_order", sf.size, sf.mean,
                                              note + "; used first_order")
                    continue
                except NumericError as exc:
                    note += f"; first_order failed ({exc.code})"
            mean = float(Vs.mean()) if Vs.size else overall
            fits[(c, d)] = StratumFit((c, d), None, "constant", int(Vs.size), mean,
                                      note + "; used stratum mean")
    return fits


def projected_instrument(projection_fits: dict, dataset: Dataset) -> np.ndarray:
    """v_hat(U_i) from subject i's stratum model."""
    _, delta = projection_outcome(dataset)
    D = dataset.treatment
    raw = _projection_raw(dataset)
    v = np.empty(dataset.n)
    for (c, d), sf in projection_fits.items():
        mask = (delta == c) & (D == d)
        if np.any(mask):
            v[mask] = sf.predict(raw[mask])
    return np.clip(v, PROB_CLAMP, 1.0 - PROB_CLAMP)


def kappa_v_hat(propensity_fit: LogisticFit, projection_fits: dict, dataset: Dataset) -> WeightSet:
    psi = propensity(propensity_fit, dataset)
    _check_psi(psi)
    v = projected_instrument(projection_fits, dataset)
    D = dataset.treatment.astype(float)
    notes = {f"stratum_{c}{d}": sf.note for (c, d), sf in projection_fits.items() if sf.note}
    return WeightSet(_kappa_formula(D, v, psi), "kappa_v", propensity_fit=propensity_fit,
                     projection_fits=projection_fits, diagnostics=notes)


def truncate_weights(weights: WeightSet, interval=DEFAULT_INTERVAL) -> WeightSet:
    lo, hi = float(interval[0]), float(interval[1])
    if not 0.0 < lo <= hi < 1.0:
        raise InputError(f"truncation interval [{lo}, {hi}] must lie strictly inside (0, 1)")
    if weights.method != "kappa_v":
        raise InputError("only kappa_v weights are truncated")
    values = np.clip(weights.values, lo, hi)
    diag = dict(weights.diagnostics)
    diag["n_clamped"] = int(np.sum((weights.values < lo) | (weights.values > hi)))
    return WeightSet(values, "kappa_v_tr", weights.propensity_fit, weights.projection_fits, (lo, hi), diag)


def unit_weights(n: int) -> WeightSet:
    return WeightSet(np.ones(n), "unit")


def oracle_weights(is_complier) -> WeightSet:
    return WeightSet(np.asarray(is_complier, dtype=float), "oracle")


def complier_proportion(weights: WeightSet) -> float:
    """Mean weight; for the kappa family this estimates P(D1 > D0)."""
    if len(weights) == 0:
        raise InputError("complier proportion of an empty weight set")
    return float(np.mean(weights.values))


def compute_weights(dataset: Dataset, method: str, design_policy: str = "second_order",
                    interval=DEFAULT_INTERVAL, oracle=None) -> WeightSet:
    """Run the first stage and build weights of the requested kind."""
    if method == "unit":
        return unit_weights(dataset.n)
    if method == "oracle":
        if oracle is None:
            raise InputError("oracle weights need complier labels (simulated data only)")
        return oracle_weights(oracle)
    if method not in METHODS:
        raise InputError(f"unknown weight method {method!r}")
    pfit = fit_propensity(dataset.instrument, _propensity_raw(dataset))
    if method == "kappa":
        return kappa_hat(pfit, dataset)
    kv = kappa_v_hat(pfit, fit_projection(dataset, design_policy), dataset)
    if method == "kappa_v":
        return kv
    return truncate_weights(kv, interval)
