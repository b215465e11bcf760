"""Standard errors for the weighted PH estimate.

``bootstrap_variance`` resamples subjects and reruns the whole estimator;
``analytic_variance`` is the sandwich-type plug-in for the signed kappa
weights that accounts for the estimated instrument propensity.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ivcox.data import RECURRENT, CountingView, Dataset, build_counting_view
from ivcox.errors import (ConvergenceError, InputError, InsufficientConvergence, NumericError,
                          SingularCurvature)
from ivcox.firststage import LogisticFit, influence_matrix
from ivcox.phfit import PhFit, _Engine
from ivcox.pipeline import EstimatorConfig, estimate
from ivcox.weights import WeightSet, propensity

MAD_SCALE = 1.4826
JITTER_SD = 1e-5
FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    cov: np.ndarray
    method: str
    B_requested: int | None = None
    B_attempted: int | None = None
    B_converged: int | None = None
    outlier_policy: dict = field(default_factory=dict)
    betas: np.ndarray | None = None
    attempts: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def mad_se(self) -> np.ndarray | None:
        if self.betas is None or self.betas.shape[0] < 2:
            return None
        return mad_se(self.betas)

    def with_mad(self) -> "VarianceEstimate":
        """SE-only estimate with the MAD scale on the diagonal."""
        if self.betas is None:
            raise InputError("MAD standard errors need bootstrap replicates")
        s = mad_se(self.betas)
        cov = np.full((s.size, s.size), np.nan)
        np.fill_diagonal(cov, s ** 2)
        policy = dict(self.outlier_policy, substituted="mad", empirical_se=self.se.tolist())
        return VarianceEstimate(cov, "bootstrap_mad", self.B_requested, self.B_attempted,
                                self.B_converged, policy, self.betas, self.attempts)


def mad_se(bootstrap_betas) -> np.ndarray:
    """Componentwise 1.4826 * median(|b - median(b)|)."""
    b = np.asarray(bootstrap_betas, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] < 2:
        raise InputError("MAD needs at least two replicates")
    med = np.median(b, axis=0)
    return MAD_SCALE * np.median(np.abs(b - med), axis=0)


def _jitter(ds: Dataset, rng) -> Dataset:
    """Add N(0, JITTER_SD^2) noise to the time axis of a resampled dataset."""
    if ds.mode == RECURRENT:
        events = tuple(np.asarray(e, float) + rng.normal(0.0, JITTER_SD, len(e)) for e in ds.event_times)
        lo, hi = ds.window[:, 0], ds.window[:, 1]
        events = tuple(np.clip(e, lo_i + 1e-12, hi_i) for e, lo_i, hi_i in zip(events, lo, hi))
        return ds.replace(event_times=events)
    time = ds.time + rng.normal(0.0, JITTER_SD, ds.n)
    floor = ds.entry if ds.entry is not None else np.zeros(ds.n)
    time = np.where(time > floor, time, floor + (ds.time - floor) / 2.0)
    return ds.replace(time=time)


def replicate_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def bootstrap_replicate(dataset: Dataset, config: EstimatorConfig, seed: int, index: int, oracle=None):
    """One resample-jitter-refit; returns (beta or None, failure code or None)."""
    rng = np.random.default_rng(replicate_seed(seed, index))
    idx = rng.integers(0, dataset.n, dataset.n)
    ds = _jitter(dataset.take(idx), rng)
    lab = None if oracle is None else np.asarray(oracle)[idx]
    try:
        return estimate(ds, config, oracle=lab).beta, None
    except (ConvergenceError, NumericError) as exc:
        return None, exc.code


def _run_batch(args):
    dataset, config, seed, indices, oracle = args
    return [bootstrap_replicate(dataset, config, seed, i, oracle) for i in indices]


def _map_attempts(dataset, config, seed, indices, oracle, workers):
    if workers <= 1 or len(indices) < 2:
        return _run_batch((dataset, config, seed, indices, oracle))
    chunks = [indices[k::workers] for k in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_batch, [(dataset, config, seed, c, oracle) for c in chunks]))
    # reassemble in attempt order so results do not depend on scheduling
    out = [None] * len(indices)
    pos = {i: k for k, i in enumerate(indices)}
    for c, part in zip(chunks, parts):
        for i, r in zip(c, part):
            out[pos[i]] = r
    return out


def bootstrap_variance(dataset: Dataset, weight_method: str | EstimatorConfig = "kappa_v_tr",
                       fit_options=None, B: int = 200, seed: int = 0, oracle=None,
                       workers: int = 1) -> VarianceEstimate:
    """Nonparametric bootstrap over subjects.

    Attempts are indexed 0, 1, ...; attempt ``i`` draws from
    ``SeedSequence([seed, i])``.  The first ``B`` converged attempts (in
    index order) form the estimate; at most ``3B`` attempts are made.
    """
    if B < 2:
        raise InputError("bootstrap needs B >= 2")
    if isinstance(weight_method, EstimatorConfig):
        config = weight_method
    else:
        config = EstimatorConfig(method=weight_method)
    if fit_options is not None:
        config = config.with_(fit_options=fit_options)
    workers = max(1, int(workers))

    results = []
    attempted = 0
    while attempted < 3 * B:
        got = sum(r[0] is not None for r in results)
        if got >= B:
            break
        need = min(3 * B - attempted, max(B - got, 1) if attempted else B)
        indices = list(range(attempted, attempted + need))
        results.extend(_map_attempts(dataset, config, seed, indices, oracle, workers))
        attempted += need

    ok = [(i, r[0]) for i, r in enumerate(results) if r[0] is not None][:B]
    last = ok[-1][0] + 1 if len(ok) == B else attempted
    failures: dict[str, int] = {}
    for r in results[:last]:
        if r[1] is not None:
            failures[r[1]] = failures.get(r[1], 0) + 1
    q = dataset.p + 1
    betas = np.array([b for _, b in ok]).reshape(-1, q)
    cov = np.cov(betas, rowvar=False).reshape(q, q) if len(ok) >= 2 else np.full((q, q), np.nan)
    policy = {"failures": failures}
    if len(ok) >= 2:
        policy["mad_se"] = mad_se(betas).tolist()
    est = VarianceEstimate(cov=(cov + cov.T) / 2.0, method="bootstrap", B_requested=B, B_attempted=last,
                           B_converged=len(ok), outlier_policy=policy, betas=betas,
                           attempts=tuple(r[1] or "ok" for r in results[:last]))
    if len(ok) < B:
        raise InsufficientConvergence(f"only {len(ok)} of {B} bootstrap fits converged in {attempted} attempts",
                                      est)
    return est


def dphi_dalpha(treatment, instrument, psi, covariates) -> np.ndarray:
    """Row i is the derivative of the kappa weight of subject i in the propensity coefficients."""
    D = np.asarray(treatment, float)
    V = np.asarray(instrument, float)
    psi = np.asarray(psi, float)
    c = -D * (1.0 - V) * psi / (1.0 - psi) + (1.0 - D) * V * (1.0 - psi) / psi
    x = np.column_stack([np.ones(D.shape[0]), np.asarray(covariates, float).reshape(D.shape[0], -1)])
    return c[:, None] * x


def _kappa_at(alpha, pfit: LogisticFit, dataset: Dataset) -> np.ndarray:
    eta = pfit.design_spec.build(dataset.covariates) @ alpha
    psi = 1.0 / (1.0 + np.exp(-eta))
    D = dataset.treatment.astype(float)
    V = dataset.instrument.astype(float)
    return 1.0 - D * (1.0 - V) / (1.0 - psi) - (1.0 - D) * V / psi


def _subject_integrals(view: CountingView, beta, E, dL):
    """m_i = int (Z_i - E(t)) dM_i(t) for every subject, with the Breslow compensator."""
    n, q = view.Z.shape
    m = np.zeros((n, q))
    np.add.at(m, view.event_subject, view.Z[view.event_subject] - E[view.event_grid])
    grid = view.grid
    lo = np.searchsorted(grid, view.entry, side="right")
    hi = np.searchsorted(grid, view.exit, side="right")
    c0 = np.concatenate([[0.0], np.cumsum(dL)])
    c1 = np.vstack([np.zeros((1, q)), np.cumsum(dL[:, None] * E, axis=0)])
    r = np.exp(view.Z @ beta)
    m -= r[:, None] * (view.Z * (c0[hi] - c0[lo])[:, None] - (c1[hi] - c1[lo]))
    return m


def analytic_variance(dataset: Dataset, fit: PhFit, logistic_fit: LogisticFit, weights: WeightSet,
                      view: CountingView | None = None) -> VarianceEstimate:
    """Plug-in covariance for kappa-weighted fits, corrected for the estimated propensity.

    With subject contributions

        a_i  = kappa_i int (Z_i - E) dM_i
        IA_i = G1 I_alpha,i - G2 I_alpha,i
        G1   = (1/n) sum_j m_j Dphi_j'           (m_j = int (Z_j - E) dM_j)
        G2   = (1/n) sum_k DE(t_k) sum_j kappa_j dM_j(t_k)

    the covariance is phi^-1 [(1/n) sum_i (a_i + IA_i)(a_i + IA_i)'] phi^-1 / n
    where phi = (1/n) sum_k dW_k V(t_k).  DE is the derivative of the
    weighted covariate mean in the propensity coefficients, taken by central
    differences.
    """
    if weights.method != "kappa":
        raise InputError("the analytic variance is derived for kappa weights only")
    view = view or build_counting_view(dataset)
    beta = np.asarray(fit.beta, float)
    w = weights.values
    n, q = view.Z.shape
    eng = _Engine(view, w)
    S0, E, V = eng.ratio(beta)
    a = eng.active & (S0 != 0)
    E = np.where(a[:, None], E, 0.0)
    phi = np.einsum("k,kij->ij", eng.dW[a], V[a]) / n
    s = np.linalg.svd(phi, compute_uv=False)
    if not np.all(np.isfinite(phi)) or s[0] <= 0 or s[-1] / s[0] < 1e-12:
        raise SingularCurvature("curvature matrix of the weighted partial likelihood is singular")

    dL = np.zeros(S0.shape)
    dL[a] = eng.dW[a] / S0[a]
    m = _subject_integrals(view, beta, E, dL)
    a_i = w[:, None] * m

    I_alpha = influence_matrix(logistic_fit, dataset.instrument, dataset.covariates)
    psi = propensity(logistic_fit, dataset)
    Dphi = dphi_dalpha(dataset.treatment, dataset.instrument, psi, dataset.covariates)
    G1 = m.T @ Dphi / n

    # sum_j kappa_j dM_j(t_k): weighted events minus weighted compensator
    kdM = eng.dW - S0 * dL
    alpha = logistic_fit.alpha
    DE = np.zeros((view.grid.shape[0], q, alpha.shape[0]))
    for l in range(alpha.shape[0]):
        h = np.zeros_like(alpha)
        h[l] = FD_STEP
        _, Ep, _ = _Engine(view, _kappa_at(alpha + h, logistic_fit, dataset)).ratio(beta)
        _, Em, _ = _Engine(view, _kappa_at(alpha - h, logistic_fit, dataset)).ratio(beta)
        DE[:, :, l] = np.where(a[:, None], (Ep - Em) / (2.0 * FD_STEP), 0.0)
    G2 = np.einsum("k,kij->ij", kdM, DE) / n

    contrib = a_i + I_alpha @ (G1 - G2).T
    pinv = np.linalg.inv(phi)
    psi_i = contrib @ pinv.T
    omega = psi_i.T @ psi_i / n
    cov = omega / n
    return VarianceEstimate(cov=(cov + cov.T) / 2.0, method="analytic",
                            outlier_policy={"G2_norm": float(np.max(np.abs(G2)))})


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def normal_ci(beta, se, z: float = 1.959963984540054):
    beta = np.asarray(beta, float)
    se = np.asarray(se, float)
    return beta - z * se, beta + z * se


__all__ = ["VarianceEstimate", "bootstrap_variance", "analytic_variance", "mad_se", "dphi_dalpha",
           "normal_ci", "default_workers"]
