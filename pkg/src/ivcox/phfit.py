"""Weighted proportional-hazards engine.

All quantities are evaluated on the grid of distinct event times of a
:class:`~ivcox.data.CountingView`.  With weights ``w`` and coefficients
``beta`` the weighted risk-set sums are

    S0(t) = sum_l w_l Y_l(t) exp(beta'z_l),   S1(t) = sum_l ... z_l,   S2(t) = sum_l ... z_l z_l',

the (untruncated) score is ``sum_events w_i (z_i - S1/S0)`` and the
objective maximized for signed weights is

    Cbar(beta) = (1/n) sum_events w_i [beta'z_i - log max(S0(t_i), nu)].

Exponentials are centred on the largest linear predictor, so every sum
below is carried as ``S * exp(-shift)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from ivcox.data import CountingView
from ivcox.errors import DegenerateRiskSet, NoConvergence
from ivcox.weights import WeightSet

DEFAULT_NU = 1e-4
DEFAULT_TOL = 0.05


@dataclass(frozen=True)
class FitOptions:
    nu: float = DEFAULT_NU
    tol: float = DEFAULT_TOL
    max_iter: int = 500
    grad_tol: float = 1e-8
    start_offsets: tuple[float, ...] = (0.0, 0.5, -0.5)
    start: tuple[float, ...] | None = None
    path: str = "auto"
    polish: bool = True

    def with_(self, **kw) -> "FitOptions":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class PhFit:
    beta: np.ndarray
    objective: float
    score_norm: float
    converged: bool
    starts_tried: list = field(default_factory=list)
    method_tag: str = "unit"
    nu: float = DEFAULT_NU
    tol: float = DEFAULT_TOL
    path: str = "newton"
    iterations: int = 0
    n: int = 0
    score: np.ndarray | None = None

    @property
    def score_norm_raw(self) -> float:
        """Sup-norm of the score without the 1/sqrt(n) factor."""
        return self.score_norm * math.sqrt(self.n)


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    times: np.ndarray
    increments: np.ndarray
    has_negative: bool

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def at(self, t) -> np.ndarray:
        """Cumulative hazard at times ``t`` (right-continuous step function)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        cum = np.concatenate([[0.0], self.cumulative])
        return cum[idx]


def _grid_sums(view: CountingView, f: np.ndarray) -> np.ndarray:
    """sum_l Y_l(t) f_l at every grid time; f has shape (n, ...)."""
    pad = np.zeros((1,) + f.shape[1:])
    fe = f[view.exit_order]
    cs = np.concatenate([np.cumsum(fe[::-1], axis=0)[::-1], pad])
    out = cs[view.pos_exit]
    if view.pos_entry is not None:
        fs = f[view.entry_order]
        cs_entry = np.concatenate([np.cumsum(fs[::-1], axis=0)[::-1], pad])
        out = out - cs_entry[view.pos_entry]
    return out


class _Engine:
    """Caches the event-side aggregates of one (view, weights) pair."""

    def __init__(self, view: CountingView, w):
        self.view = view
        self.w = np.asarray(w, dtype=float)
        if self.w.shape[0] != view.n:
            raise ValueError(f"{self.w.shape[0]} weights for {view.n} subjects")
        self.n = view.n
        ew = self.w[view.event_subject]
        self.dW = np.bincount(view.event_grid, weights=ew, minlength=view.grid.shape[0])
        self.zsum = ew @ view.Z[view.event_subject] if view.n_events else np.zeros(view.Z.shape[1])
        self.active = self.dW != 0
        self.signed = bool(np.any(self.w < 0))

    def sums(self, beta, order=1):
        eta = self.view.Z @ beta
        shift = float(np.max(eta)) if eta.size else 0.0
        r = self.w * np.exp(eta - shift)
        s0 = _grid_sums(self.view, r)
        if order == 0:
            return shift, s0, None, None
        rz = r[:, None] * self.view.Z
        s1 = _grid_sums(self.view, rz)
        if order == 1:
            return shift, s0, s1, None
        rzz = rz[:, :, None] * self.view.Z[:, None, :]
        s2 = _grid_sums(self.view, rzz)
        return shift, s0, s1, s2

    def _log_trunc(self, shift, s0, nu):
        # log max(S0, nu) with S0 = s0 * exp(shift)
        a = self.active
        out = np.full(s0.shape, math.log(nu) if nu > 0 else -np.inf)
        keep = a & (s0 > 0)
        logs = np.log(s0[keep]) + shift
        if nu > 0:
            logs = np.maximum(logs, math.log(nu))
        out[keep] = logs
        return out, keep & (out > (math.log(nu) if nu > 0 else -np.inf))

    def objective(self, beta, nu):
        shift, s0, _, _ = self.sums(beta, 0)
        logs, _ = self._log_trunc(shift, s0, nu)
        a = self.active
        return float((beta @ self.zsum - self.dW[a] @ logs[a]) / self.n)

    def objective_grad(self, beta, nu):
        """Cbar and its exact gradient (the nu-truncated terms are constant in beta)."""
        shift, s0, s1, _ = self.sums(beta, 1)
        logs, live = self._log_trunc(shift, s0, nu)
        a = self.active
        val = (beta @ self.zsum - self.dW[a] @ logs[a]) / self.n
        E = s1[live] / s0[live, None]
        grad = (self.zsum - self.dW[live] @ E) / self.n
        return float(val), grad

    def score(self, beta, nu=DEFAULT_NU, strict=True):
        """Unnormalized score sum_events w_i (z_i - S1/S0)."""
        shift, s0, s1, _ = self.sums(beta, 1)
        a = self.active
        if self.signed:
            small = a & (np.abs(s0) * math.exp(shift) < nu)
            if np.any(small):
                if strict:
                    raise DegenerateRiskSet(
                        f"{int(small.sum())} event times with |S0| < {nu:g} under signed weights")
                return np.full(self.view.Z.shape[1], np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            E = s1[a] / s0[a, None]
        return self.zsum - self.dW[a] @ E

    def information(self, beta):
        """sum_k dW_k V(t_k): minus the Hessian of n * Cbar where S0 > nu."""
        shift, s0, s1, s2 = self.sums(beta, 2)
        a = self.active & (s0 != 0)
        E = s1[a] / s0[a, None]
        V = s2[a] / s0[a, None, None] - E[:, :, None] * E[:, None, :]
        return np.einsum("k,kij->ij", self.dW[a], V)

    def ratio(self, beta):
        """E(t) = S1/S0 on the grid together with S0 (unshifted)."""
        shift, s0, s1, s2 = self.sums(beta, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            E = s1 / s0[:, None]
            V = s2 / s0[:, None, None] - E[:, :, None] * E[:, None, :]
        return s0 * math.exp(shift), E, V


def _weights_array(weights):
    if isinstance(weights, WeightSet):
        return weights.values, weights.method
    return np.asarray(weights, dtype=float), "custom"


def risk_sums(beta, t, weights, view: CountingView):
    """(S0, S1, S2) at time ``t`` by direct summation over the at-risk set."""
    w, _ = _weights_array(weights)
    beta = np.asarray(beta, dtype=float)
    y = view.at_risk(t).astype(float)
    r = w * y * np.exp(view.Z @ beta)
    s1 = r @ view.Z
    s2 = (view.Z * r[:, None]).T @ view.Z
    return float(np.sum(r)), s1, s2


def event_risk_sums(beta, weights, view: CountingView) -> np.ndarray:
    """S0 at each event time that carries nonzero event weight."""
    w, _ = _weights_array(weights)
    eng = _Engine(view, w)
    shift, s0, _, _ = eng.sums(np.asarray(beta, dtype=float), 0)
    return s0[eng.active] * math.exp(shift)


def objective(beta, weights, view: CountingView, nu: float = DEFAULT_NU) -> float:
    w, _ = _weights_array(weights)
    return _Engine(view, w).objective(np.asarray(beta, dtype=float), nu)


def objective_gradient(beta, weights, view: CountingView, nu: float = DEFAULT_NU) -> np.ndarray:
    w, _ = _weights_array(weights)
    return _Engine(view, w).objective_grad(np.asarray(beta, dtype=float), nu)[1]


def score(beta, weights, view: CountingView, normalized: bool = True, nu: float = DEFAULT_NU) -> np.ndarray:
    """The estimating function U(beta); ``normalized`` applies the 1/sqrt(n) factor.

    Raises :class:`DegenerateRiskSet` when signed weights leave an event time
    with ``|S0| < nu``.
    """
    w, _ = _weights_array(weights)
    u = _Engine(view, w).score(np.asarray(beta, dtype=float), nu=nu)
    return u / math.sqrt(view.n) if normalized else u


def information(beta, weights, view: CountingView) -> np.ndarray:
    w, _ = _weights_array(weights)
    return _Engine(view, w).information(np.asarray(beta, dtype=float))


def model_covariance(beta, weights, view: CountingView) -> np.ndarray:
    """Inverse observed information; the model-based Cox covariance for unit weights."""
    return np.linalg.inv(information(beta, weights, view))


def _newton(engine: _Engine, start, opts: FitOptions):
    beta = np.array(start, dtype=float)
    n = engine.n
    val = engine.objective(beta, 0.0)
    it = 0
    for it in range(1, opts.max_iter + 1):
        _, grad = engine.objective_grad(beta, 0.0)
        info = engine.information(beta) / n
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            return beta, it, False
        if not np.all(np.isfinite(step)):
            return beta, it, False
        for _ in range(30):
            cand = beta + step
            cval = engine.objective(cand, 0.0)
            if np.isfinite(cval) and cval >= val - 1e-14 * max(1.0, abs(val)):
                break
            step = step / 2.0
        else:
            return beta, it, False
        beta, val = cand, cval
        if np.max(np.abs(step)) < 1e-11 or np.max(np.abs(grad)) < 1e-15:
            break
    _, grad = engine.objective_grad(beta, 0.0)
    return beta, it, bool(np.max(np.abs(grad)) < opts.grad_tol)


def _polish(engine: _Engine, beta, nu, opts):
    """Newton steps on Cbar while its Hessian is negative definite."""
    val, grad = engine.objective_grad(beta, nu)
    for _ in range(20):
        info = engine.information(beta) / engine.n
        try:
            np.linalg.cholesky(info)
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(20):
            cand = beta + step
            cval, cgrad = engine.objective_grad(cand, nu)
            if cval >= val - 1e-14 * max(1.0, abs(val)):
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        beta, val, grad = cand, cval, cgrad
        if np.max(np.abs(step)) < 1e-12:
            break
    return beta


def _certify(engine: _Engine, beta, opts: FitOptions):
    u = engine.score(beta, nu=opts.nu, strict=False)
    norm = float(np.max(np.abs(u))) / math.sqrt(engine.n) if np.all(np.isfinite(u)) else math.inf
    return u, norm


def naive_fit(view: CountingView, options: FitOptions | None = None) -> PhFit:
    """Unit-weight fit: the standard Cox estimate on the whole sample."""
    return fit(view, np.ones(view.n), options, method_tag="unit")


def fit(view: CountingView, weights, options: FitOptions | None = None, method_tag: str | None = None) -> PhFit:
    """Estimate beta.

    Nonnegative weights: Newton-Raphson on the weighted log partial
    likelihood from zero.  Signed weights: BFGS on Cbar from the naive
    estimate and the naive estimate shifted by each of ``start_offsets``,
    keeping the highest objective among candidates whose normalized score
    sup-norm is within ``tol``.

    Raises :class:`NoConvergence` (carrying the best candidate) if no
    candidate is certified.
    """
    opts = options or FitOptions()
    w, tag = _weights_array(weights)
    tag = method_tag or tag
    engine = _Engine(view, w)
    q = view.Z.shape[1]
    path = opts.path
    if path == "auto":
        path = "bfgs" if engine.signed else "newton"

    candidates = []
    if view.n_events == 0 or not np.any(engine.active):
        best = PhFit(np.zeros(q), 0.0, math.inf, False, [], tag, opts.nu, opts.tol, path, 0, view.n)
        raise NoConvergence("no weighted events: the objective is identically zero", best)

    if path == "newton":
        start = np.zeros(q) if opts.start is None else np.asarray(opts.start, float)
        beta, it, ok = _newton(engine, start, opts)
        val = engine.objective(beta, opts.nu)
        u, norm = _certify(engine, beta, opts)
        candidates.append(dict(start=start.tolist(), beta=beta, objective=val, score_norm=norm,
                               certified=bool(ok and norm <= opts.tol), iterations=it))
    else:
        if opts.start is None:
            base = naive_fit(view, opts.with_(start=None)).beta
        else:
            base = np.asarray(opts.start, float)
        for off in opts.start_offsets:
            start = base + off
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = optimize.minimize(
                    lambda b: tuple(-x for x in engine.objective_grad(b, opts.nu)),
                    start, jac=True, method="BFGS",
                    options=dict(gtol=opts.grad_tol, maxiter=opts.max_iter),
                )
            beta = res.x
            if opts.polish and np.all(np.isfinite(beta)):
                beta = _polish(engine, beta, opts.nu, opts)
            val = engine.objective(beta, opts.nu)
            u, norm = _certify(engine, beta, opts)
            candidates.append(dict(start=start.tolist(), beta=beta, objective=val, score_norm=norm,
                                   certified=bool(np.all(np.isfinite(beta)) and norm <= opts.tol),
                                   iterations=int(res.nit), message=str(res.message)))

    certified = [c for c in candidates if c["certified"]]
    pool = certified or [c for c in candidates if np.all(np.isfinite(c["beta"]))] or candidates
    best = max(pool, key=lambda c: (c["objective"], -c["score_norm"]))
    u, norm = _certify(engine, best["beta"], opts)
    result = PhFit(
        beta=np.array(best["beta"]),
        objective=float(best["objective"]),
        score_norm=norm,
        converged=bool(certified),
        starts_tried=[{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in c.items()}
                      for c in candidates],
        method_tag=tag,
        nu=opts.nu,
        tol=opts.tol,
        path=path,
        iterations=int(sum(c["iterations"] for c in candidates)),
        n=view.n,
        score=u / math.sqrt(view.n),
    )
    if not certified:
        raise NoConvergence(f"no start certified (best score sup-norm {norm:.4g} > tol {opts.tol:g})",
                            result)
    return result


def breslow(view: CountingView, weights, beta, nu: float = DEFAULT_NU) -> BaselineHazard:
    """Weighted Breslow increments dLambda0(t_k) = sum_i w_i dN_i(t_k) / S0(t_k)."""
    w, _ = _weights_array(weights)
    engine = _Engine(view, w)
    beta = np.asarray(beta, dtype=float)
    shift, s0, _, _ = engine.sums(beta, 0)
    S0 = s0 * math.exp(shift)
    a = engine.active
    if engine.signed and np.any(a & (np.abs(S0) < nu)):
        raise DegenerateRiskSet("event time with |S0| below nu under signed weights")
    inc = np.zeros_like(S0)
    inc[a] = engine.dW[a] / S0[a]
    return BaselineHazard(times=view.grid.copy(), increments=inc, has_negative=bool(np.any(inc < 0)))


def surface(view: CountingView, weights, axis: int, grid, beta_fixed, nu: float = DEFAULT_NU) -> np.ndarray:
    """Objective and normalized score along one coordinate.

    Returns an array with columns (beta_axis, objective, score_1, ..., score_q).
    The score is the raw estimating function, so it may blow up where the
    signed-weight risk sum crosses zero.
    """
    lo, hi, steps = float(grid[0]), float(grid[1]), int(grid[2])
    w, _ = _weights_array(weights)
    engine = _Engine(view, w)
    beta = np.array(beta_fixed, dtype=float)
    q = beta.shape[0]
    xs = np.linspace(lo, hi, steps)
    rows = np.empty((steps, 2 + q))
    sq = math.sqrt(view.n)
    for k, x in enumerate(xs):
        beta[axis] = x
        rows[k, 0] = x
        rows[k, 1] = engine.objective(beta, nu)
        rows[k, 2:] = _raw_score(engine, beta) / sq
    return rows


def _raw_score(engine: _Engine, beta):
    shift, s0, s1, _ = engine.sums(beta, 1)
    a = engine.active
    with np.errstate(divide="ignore", invalid="ignore"):
        E = s1[a] / s0[a, None]
    return engine.zsum - engine.dW[a] @ E


def sign_changes(values) -> int:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v) & (v != 0)]
    return int(np.sum(np.signbit(v[1:]) != np.signbit(v[:-1])))
