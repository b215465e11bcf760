"""Maximum-likelihood logistic regression for the instrument propensity and
for the stratified projection model, with per-subject influence functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ivcox.errors import InputError, Separation, Singular

PROB_CLAMP = 1e-12
ETA_LIMIT = 30.0
SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 20
STEP_TOL = 1e-6


@dataclass(frozen=True)
class DesignSpec:
    """How regressors are built from raw columns.

    ``kind`` is one of ``linear`` (raw columns as is), or one of the
    projection policies, where raw column 0 is the follow-up time W and the
    rest are covariates: ``first_order`` (W, X), ``interaction_only``
    (W, X, W*X), ``second_order`` (W, X, W^2, X_j^2, W*X_j) and ``marginal``
    (X only).  Squares of 0/1 columns are skipped since they duplicate the
    column itself.
    """

    kind: str
    n_raw: int
    binary: tuple[bool, ...] = ()

    def build(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        if raw.ndim == 1:
            raw = raw.reshape(-1, self.n_raw) if self.n_raw else raw.reshape(-1, 0)
        if raw.shape[1] != self.n_raw:
            raise InputError(f"expected {self.n_raw} raw columns, got {raw.shape[1]}")
        one = np.ones((raw.shape[0], 1))
        if self.kind == "linear":
            return np.hstack([one, raw])
        w, x = raw[:, :1], raw[:, 1:]
        binary = self.binary[1:] if self.binary else (False,) * x.shape[1]
        if self.kind == "marginal":
            cols = [one, x]
        elif self.kind == "first_order":
            cols = [one, w, x]
        elif self.kind == "interaction_only":
            cols = [one, w, x, w * x]
        elif self.kind == "second_order":
            sq = x[:, [j for j, b in enumerate(binary) if not b]] ** 2
            cols = [one, w, x, w ** 2, sq, w * x]
        else:
            raise InputError(f"unknown design kind {self.kind!r}")
        return np.hstack(cols)

    def names(self) -> list[str]:
        if self.kind == "linear":
            return ["(intercept)"] + [f"x{j + 1}" for j in range(self.n_raw)]
        xs = [f"x{j + 1}" for j in range(self.n_raw - 1)]
        binary = self.binary[1:] if self.binary else (False,) * len(xs)
        if self.kind == "marginal":
            return ["(intercept)"] + xs
        if self.kind == "first_order":
            return ["(intercept)", "W"] + xs
        if self.kind == "interaction_only":
            return ["(intercept)", "W"] + xs + [f"W*{x}" for x in xs]
        return (["(intercept)", "W"] + xs + ["W^2"] + [f"{x}^2" for x, b in zip(xs, binary) if not b]
                + [f"W*{x}" for x in xs])

    @classmethod
    def for_data(cls, kind: str, raw) -> "DesignSpec":
        raw = np.asarray(raw, dtype=float)
        binary = tuple(bool(np.all((raw[:, j] == 0) | (raw[:, j] == 1))) for j in range(raw.shape[1]))
        return cls(kind=kind, n_raw=raw.shape[1], binary=binary)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    alpha: np.ndarray
    info: np.ndarray
    converged: bool
    score_norm: float
    design_spec: DesignSpec | None
    n: float
    loglik: float
    iterations: int
    n_extreme: int = 0

    def predict(self, raw) -> np.ndarray:
        """Clamped probabilities for each row of raw regressors."""
        design = self.design_spec.build(raw)
        return _sigmoid(design @ self.alpha)


def _sigmoid(eta):
    return np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _loglik(y, w, eta):
    # log(1 + e^eta) without overflow
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _rcond(h):
    if not np.all(np.isfinite(h)):
        return 0.0
    s = np.linalg.svd(h, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def fit_logistic(outcomes, design, weights=None, design_spec: DesignSpec | None = None) -> LogisticFit:
    """Newton-Raphson with step halving on the Bernoulli log-likelihood.

    ``design`` must carry the intercept column.  ``weights`` are case
    (frequency) weights; the default is one per row.

    Raises
    ------
    Separation
        the iterations end without the coefficients settling while some
        linear predictor exceeds 30 in absolute value.
    Singular
        the information matrix has reciprocal condition number below 1e-12.
    """
    y = np.asarray(outcomes, dtype=float)
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InputError("design rows must match the outcome length")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("logistic outcomes must be 0/1")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    n = float(np.sum(w))
    if n <= 0:
        raise InputError("empty logistic fit")

    alpha = np.zeros(X.shape[1])
    eta = X @ alpha
    ll = _loglik(y, w, eta)
    prev_step = np.inf
    settled = False
    it = 0
    for it in range(MAX_ITER + 1):
        # y - mu and mu(1 - mu) from both tails so neither rounds to zero at large |eta|
        mu, tail = expit(eta), expit(-eta)
        grad = X.T @ (w * np.where(y == 1, tail, -mu))
        norm = float(np.max(np.abs(grad))) / n
        # a vanishing score alone is not enough: under separation the score
        # decays geometrically while the coefficients keep drifting
        if norm < SCORE_TOL and prev_step < STEP_TOL * (1.0 + np.max(np.abs(alpha))):
            settled = True
            break
        if it == MAX_ITER:
            break
        info = X.T @ (X * (w * mu * tail)[:, None])
        if _rcond(info) < 1e-12:
            if np.max(np.abs(eta)) > ETA_LIMIT:
                raise Separation("information vanished with |linear predictor| > 30")
            raise Singular("logistic information matrix is numerically singular")
        step = np.linalg.solve(info, grad)
        for _ in range(MAX_HALVINGS + 1):
            cand = alpha + step
            cand_eta = X @ cand
            cand_ll = _loglik(y, w, cand_eta)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        alpha, eta, ll = cand, cand_eta, cand_ll
        prev_step = float(np.max(np.abs(step)))

    # a finite MLE may still put outlying rows far beyond |eta| = 30; only
    # coefficients that never settle signal separation
    if not settled and np.max(np.abs(eta)) > ETA_LIMIT:
        raise Separation(f"|linear predictor| > {ETA_LIMIT:g} and coefficients still drifting "
                         f"after {it} iterations (score norm {norm:.3g})")

    mu = expit(eta)
    info = X.T @ (X * (w * mu * expit(-eta))[:, None])
    if _rcond(info) < 1e-12:
        raise Singular("logistic information matrix is numerically singular")
    extreme = int(np.sum((mu <= PROB_CLAMP) | (mu >= 1.0 - PROB_CLAMP)))
    return LogisticFit(
        alpha=alpha,
        info=info,
        converged=bool(settled),
        score_norm=norm,
        design_spec=design_spec,
        n=n,
        loglik=ll,
        iterations=it,
        n_extreme=extreme,
    )


def fit_propensity(instrument, covariates, weights=None) -> LogisticFit:
    """P(V = 1 | X) with a linear logistic predictor."""
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1)
    spec = DesignSpec(kind="linear", n_raw=covariates.shape[1])
    return fit_logistic(instrument, spec.build(covariates), weights=weights, design_spec=spec)


def predict_prob(fit: LogisticFit, x) -> float:
    """psi(alpha_hat, x) for one raw regressor vector, clamped to [1e-12, 1 - 1e-12]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != fit.design_spec.n_raw:
        raise InputError(f"covariate vector has length {x.shape[0]}, fit expects {fit.design_spec.n_raw}")
    return float(fit.predict(x.reshape(1, -1))[0])


def influence_matrix(fit: LogisticFit, outcomes, raw) -> np.ndarray:
    """Row i is ``n * info^{-1} (V_i - psi_i) x_i``, the MLE influence of subject i."""
    design = fit.design_spec.build(raw)
    resid = np.asarray(outcomes, dtype=float) - _sigmoid(design @ fit.alpha)
    if _rcond(fit.info) < 1e-12:
        raise Singular("logistic information matrix is numerically singular")
    return fit.n * np.linalg.solve(fit.info, (design * resid[:, None]).T).T


def influence_alpha(fit: LogisticFit, record) -> np.ndarray:
    """Influence of one subject record on the propensity coefficients."""
    x = np.asarray(record.covariates, dtype=float).reshape(1, -1)
    return influence_matrix(fit, [record.instrument], x)[0]
