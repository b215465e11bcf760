"""Synthetic data satisfying the instrument assumptions by construction.

Each subject gets a covariate vector, a latent compliance class (complier,
always-taker, never-taker; no defiers), an instrument drawn from a logistic
propensity, the treatment implied by (instrument, class), potential event
times under each treatment level, and an independent exponential censoring
time.  Complier times follow ``exp(-beta'z + eps)`` with ``eps`` the log of a
unit exponential, i.e. a proportional hazards model with unit baseline
hazard and log hazard ratio ``beta``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from ivcox.data import (COMPETING_RISKS, LEFT_TRUNCATED, RECURRENT, Dataset)
from ivcox.errors import InputError

COMPLIER, ALWAYS, NEVER = 0, 1, 2
CLASS_NAMES = ("complier", "always", "never")

# (P(complier), n, covariate law)
CASES = {
    1: (1 / 3, 1000, "uniform"),
    2: (2 / 3, 1000, "uniform"),
    3: (1 / 3, 4000, "uniform"),
    4: (2 / 3, 4000, "uniform"),
    5: (1 / 3, 1000, "bernoulli"),
    6: (2 / 3, 1000, "bernoulli"),
    7: (1 / 3, 4000, "bernoulli"),
    8: (2 / 3, 4000, "bernoulli"),
}

# complier (beta_d, beta_x); non-complier log-time coefficients (on D, on X) and noise law
SCENARIOS = {
    1: dict(beta=(-0.5, -0.2), nc_coef=(0.0, -0.02), nc_noise="normal"),
    2: dict(beta=(-0.3, 0.05), nc_coef=(0.5, -0.05), nc_noise="extreme"),
}


@dataclass(frozen=True)
class SimConfig:
    """Generator settings.  ``SimConfig.from_case(s, c)`` reproduces Table-1 cases.

    ``noncomplier_noise_var`` is the variance of the normal log-time noise
    used when ``noncomplier_noise == "normal"``.  Censoring is exponential
    with rate ``censoring_rate``.
    """

    scenario: int = 1
    case: int | None = None
    p_complier: float = 1 / 3
    n: int = 1000
    covariate_law: str = "uniform"
    p: int = 1
    alpha: tuple[float, ...] = (0.0, 1.0)
    beta_complier: tuple[float, ...] = (-0.5, -0.2)
    noncomplier_coef: tuple[float, ...] = (0.0, -0.02)
    noncomplier_noise: str = "normal"
    noncomplier_noise_var: float = 0.01
    censoring_rate: float = 0.5
    seed: int = 0
    truncation_quantile: float = 0.2
    cause2_rate: float = 0.3
    recurrent_window: str = "full"

    @classmethod
    def from_case(cls, scenario: int, case: int, seed: int = 0, **overrides) -> "SimConfig":
        if scenario not in SCENARIOS:
            raise InputError(f"scenario must be 1 or 2, got {scenario}")
        if case not in CASES:
            raise InputError(f"case must be in 1..8, got {case}")
        pc, n, law = CASES[case]
        sc = SCENARIOS[scenario]
        cfg = cls(scenario=scenario, case=case, p_complier=pc, n=n, covariate_law=law,
                  beta_complier=sc["beta"], noncomplier_coef=sc["nc_coef"],
                  noncomplier_noise=sc["nc_noise"], seed=seed)
        return replace(cfg, **overrides)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def validate(self):
        if not 0 < self.p_complier <= 1:
            raise InputError("p_complier must lie in (0, 1]")
        if self.n < 1:
            raise InputError("n must be positive")
        if self.covariate_law not in ("uniform", "bernoulli"):
            raise InputError(f"unknown covariate law {self.covariate_law!r}")
        if len(self.alpha) != self.p + 1:
            raise InputError("alpha needs an intercept plus one slope per covariate")
        if len(self.beta_complier) != self.p + 1 or len(self.noncomplier_coef) != self.p + 1:
            raise InputError("beta_complier and noncomplier_coef need p + 1 entries")
        if self.noncomplier_noise not in ("normal", "extreme"):
            raise InputError(f"unknown noise law {self.noncomplier_noise!r}")
        if self.censoring_rate < 0 or self.cause2_rate < 0:
            raise InputError("rates must be nonnegative")
        if self.recurrent_window not in ("full", "first_event"):
            raise InputError(f"unknown recurrent window {self.recurrent_window!r}")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class OracleDataset:
    """A dataset plus latent class and potential event times under D = 0 and D = 1."""

    dataset: Dataset
    latent: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    config: SimConfig = field(default_factory=SimConfig)

    @property
    def is_complier(self) -> np.ndarray:
        return self.latent == COMPLIER

    def take(self, idx) -> "OracleDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return OracleDataset(self.dataset.take(idx), self.latent[idx], self.t0[idx], self.t1[idx], self.config)


def _streams(seed):
    base, ext = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(base), np.random.default_rng(ext)


def _covariates(rng, law, n, p):
    if law == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, p))
    return rng.binomial(1, 0.5, size=(n, p)).astype(float)


def _base(config: SimConfig, rng):
    n, p = config.n, config.p
    X = _covariates(rng, config.covariate_law, n, p)
    pc = config.p_complier
    probs = [pc, (1 - pc) / 2, (1 - pc) / 2]
    latent = rng.choice(3, size=n, p=probs)
    alpha = np.asarray(config.alpha, float)
    psi = 1.0 / (1.0 + np.exp(-(alpha[0] + X @ alpha[1:])))
    V = (rng.uniform(size=n) < psi).astype(np.int64)
    D = np.where(latent == COMPLIER, V, np.where(latent == ALWAYS, 1, 0)).astype(np.int64)

    beta = np.asarray(config.beta_complier, float)
    eps_c = np.log(rng.exponential(1.0, size=n))
    if config.noncomplier_noise == "normal":
        eps_nc = rng.normal(0.0, np.sqrt(config.noncomplier_noise_var), size=n)
    else:
        eps_nc = np.log(rng.exponential(1.0, size=n))
    nc = np.asarray(config.noncomplier_coef, float)
    xb = X @ beta[1:]
    xnc = X @ nc[1:]
    is_c = latent == COMPLIER
    t0 = np.where(is_c, np.exp(-xb + eps_c), np.exp(xnc + eps_nc))
    t1 = np.where(is_c, np.exp(-xb - beta[0] + eps_c), np.exp(nc[0] + xnc + eps_nc))
    T = np.where(D == 1, t1, t0)
    if config.censoring_rate > 0:
        C = rng.exponential(1.0 / config.censoring_rate, size=n)
    else:
        C = np.full(n, np.inf)
    return X, latent, V, D, t0, t1, T, C


def generate(config: SimConfig) -> OracleDataset:
    """Right-censored data with oracle labels; deterministic in ``config.seed``."""
    config.validate()
    rng, _ = _streams(config.seed)
    X, latent, V, D, t0, t1, T, C = _base(config, rng)
    W = np.minimum(T, C)
    delta = (T <= C).astype(np.int64)
    ds = Dataset(time=W, status=delta, treatment=D, instrument=V, covariates=X)
    return OracleDataset(ds, latent, t0, t1, config)


def _intensity(config, latent, D, X):
    # constant-baseline intensities implied by the log-linear time models
    beta = np.asarray(config.beta_complier, float)
    nc = np.asarray(config.noncomplier_coef, float)
    lam_c = np.exp(beta[0] * D + X @ beta[1:])
    lam_nc = np.exp(-(nc[0] * D + X @ nc[1:]))
    return np.where(latent == COMPLIER, lam_c, lam_nc)


def generate_extension(config: SimConfig, mode: str) -> OracleDataset:
    """Layer left truncation, a second failure cause, or recurrent events on :func:`generate`.

    The base draws are shared with :func:`generate`; extension draws come from
    an independent stream of the same seed.
    """
    config.validate()
    rng, ext = _streams(config.seed)
    X, latent, V, D, t0, t1, T, C = _base(config, rng)
    n = config.n
    if mode == LEFT_TRUNCATED:
        W = np.minimum(T, C)
        delta = (T <= C).astype(np.int64)
        q = 0.0 if config.truncation_quantile == 0 else float(np.quantile(T, config.truncation_quantile))
        L = ext.uniform(0.0, q, size=n) if q > 0 else np.zeros(n)
        keep = L < W
        ds = Dataset(time=W[keep], status=delta[keep], treatment=D[keep], instrument=V[keep],
                     covariates=X[keep], ids=[str(i + 1) for i in np.flatnonzero(keep)],
                     entry=L[keep], mode=LEFT_TRUNCATED)
        return OracleDataset(ds, latent[keep], t0[keep], t1[keep], config)
    if mode == COMPETING_RISKS:
        if config.cause2_rate > 0:
            T2 = ext.exponential(1.0 / config.cause2_rate, size=n)
        else:
            T2 = np.full(n, np.inf)
        Tmin = np.minimum(T, T2)
        W = np.minimum(Tmin, C)
        eta = np.where(Tmin > C, 0, np.where(T <= T2, 1, 2)).astype(np.int64)
        ds = Dataset(time=W, status=eta, treatment=D, instrument=V, covariates=X,
                     mode=COMPETING_RISKS, n_causes=2)
        return OracleDataset(ds, latent, t0, t1, config)
    if mode == RECURRENT:
        W = np.minimum(T, C)
        delta = (T <= C).astype(np.int64)
        if config.recurrent_window == "first_event":
            events = tuple(np.array([W[i]]) if delta[i] else np.empty(0) for i in range(n))
        else:
            lam = _intensity(config, latent, D, X)
            counts = ext.poisson(lam * W)
            events = tuple(np.sort(ext.uniform(0.0, W[i], size=counts[i])) for i in range(n))
        status = np.array([e.size > 0 for e in events], dtype=np.int64)
        ds = Dataset(time=W, status=status, treatment=D, instrument=V, covariates=X,
                     window=np.column_stack([np.zeros(n), W]), event_times=events, mode=RECURRENT)
        return OracleDataset(ds, latent, t0, t1, config)
    raise InputError(f"unknown extension mode {mode!r}")


def _ols_pvalue(y, X, col):
    """Two-sided t-test p-value of coefficient ``col`` in an OLS fit."""
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = X.shape[0] - X.shape[1]
    sigma2 = resid @ resid / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    t = coef[col] / np.sqrt(cov[col, col])
    return float(2 * stats.t.sf(abs(t), dof))


def _strata(x):
    vals = np.unique(x)
    if vals.size <= 4:
        return [x == v for v in vals]
    edges = np.quantile(x, [0.25, 0.5, 0.75])
    b = np.searchsorted(edges, x)
    return [b == k for k in range(4)]


def check_assumptions(oracle: OracleDataset, alpha_level: float = 0.01) -> dict:
    """Empirical checks of the instrument assumptions on labelled data."""
    from ivcox.firststage import fit_propensity  # local: keeps simgen importable alone

    ds = oracle.dataset
    V, D = ds.instrument, ds.treatment
    X = ds.covariates
    implied = np.where(oracle.latent == COMPLIER, V, np.where(oracle.latent == ALWAYS, 1, 0))
    report = {
        "n": ds.n,
        "defiers": int(np.sum(~np.isin(oracle.latent, (COMPLIER, ALWAYS, NEVER)))),
        "treatment_consistent": bool(np.all(implied == D)),
        "class_freq": {name: float(np.mean(oracle.latent == k)) for k, name in enumerate(CLASS_NAMES)},
    }
    # first stage: V raises P(D = 1) within covariate strata
    effects = []
    for mask in _strata(X[:, 0]) if ds.p else [np.ones(ds.n, bool)]:
        d1 = D[mask & (V == 1)]
        d0 = D[mask & (V == 0)]
        if d1.size and d0.size:
            effects.append(float(d1.mean() - d0.mean()))
    report["first_stage_effects"] = effects
    report["a3_pass"] = bool(effects) and min(effects) > 0

    design = np.column_stack([np.ones(ds.n), V, X])
    pvals = {
        "log_t0": _ols_pvalue(np.log(oracle.t0), design, 1),
        "log_t1": _ols_pvalue(np.log(oracle.t1), design, 1),
        "complier": _ols_pvalue(oracle.is_complier.astype(float), design, 1),
    }
    report["independence_pvalues"] = pvals
    report["a1_pass"] = min(pvals.values()) > alpha_level

    pfit = fit_propensity(V, X)
    report["propensity_alpha"] = pfit.alpha.tolist()
    report["psi_at_zero"] = float(pfit.predict(np.zeros((1, ds.p)))[0])
    return report
