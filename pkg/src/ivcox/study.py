"""Monte Carlo harness: seeded replicates of the simulation design, each
analysed by every estimator, summarized into bias / SD / SE / coverage tables.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ivcox import phfit
from ivcox.errors import ConvergenceError, InputError, InsufficientConvergence, NumericError
from ivcox.phfit import FitOptions
from ivcox.pipeline import EstimatorConfig, estimate
from ivcox.simgen import SimConfig, generate
from ivcox.variance import analytic_variance, bootstrap_variance

STUDY_METHODS = ("complier", "naive", "kappa", "kappa_v", "kappa_v_tr")
_WEIGHT_OF = {"complier": "oracle", "naive": "unit"}
Z975 = 1.959963984540054


@dataclass(frozen=True)
class StudyConfig:
    scenario: int = 1
    case: int = 3
    replicates: int = 200
    seed: int = 0
    methods: tuple[str, ...] = STUDY_METHODS
    bootstrap_methods: tuple[str, ...] = ("kappa_v_tr",)
    B: int = 200
    analytic: bool = True
    design_policy: str = "second_order"
    interval: tuple[float, float] = (0.01, 0.99)
    nu: float = 1e-4
    tol: float = 0.05
    workers: int = 1
    sim_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [m for m in self.methods + self.bootstrap_methods if m not in STUDY_METHODS]
        if bad:
            raise InputError(f"unknown study method(s): {', '.join(bad)}")
        if self.replicates < 1:
            raise InputError("replicates must be >= 1")
        SimConfig.from_case(self.scenario, self.case, **self.sim_overrides).validate()

    def with_(self, **kw) -> "StudyConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["bootstrap_methods"] = list(self.bootstrap_methods)
        d["interval"] = list(self.interval)
        return d

    def estimator(self, method: str) -> EstimatorConfig:
        return EstimatorConfig(method=_WEIGHT_OF.get(method, method), design_policy=self.design_policy,
                               interval=self.interval, fit_options=FitOptions(nu=self.nu, tol=self.tol))

    def sim_config(self, replicate: int) -> SimConfig:
        return SimConfig.from_case(self.scenario, self.case, seed=replicate_seed(self.seed, replicate),
                                   **self.sim_overrides)


def replicate_seed(seed: int, replicate: int, stream: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), int(replicate), int(stream)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def run_replicate(config: StudyConfig, r: int) -> list[dict]:
    """All methods on replicate ``r``; one row per method."""
    oracle = generate(config.sim_config(r))
    labels = oracle.is_complier
    rows = []
    for k, method in enumerate(config.methods):
        row = {"replicate": r, "method": method, "converged": False, "failure": ""}
        est_cfg = config.estimator(method)
        try:
            est = estimate(oracle.dataset, est_cfg, oracle=labels)
        except (ConvergenceError, NumericError) as exc:
            row["failure"] = exc.code
            rows.append(row)
            continue
        row["converged"] = True
        row["beta"] = est.beta.tolist()
        row["score_norm"] = est.fit.score_norm
        if method in ("complier", "naive"):
            row["se_model"] = np.sqrt(np.diag(phfit.model_covariance(est.beta, est.weights, est.view))).tolist()
        if method == "kappa" and config.analytic:
            try:
                v = analytic_variance(est.dataset, est.fit, est.weights.propensity_fit, est.weights, est.view)
                row["se_analytic"] = v.se.tolist()
            except NumericError as exc:
                row["failure"] = f"analytic:{exc.code}"
        if method in config.bootstrap_methods:
            seed = replicate_seed(config.seed, r, 1 + k)
            try:
                v = bootstrap_variance(est.dataset, est_cfg, B=config.B, seed=seed, oracle=labels)
            except InsufficientConvergence as exc:
                v = exc.estimate
                row["failure"] = exc.code
            row["B_converged"] = v.B_converged
            row["B_attempted"] = v.B_attempted
            if v.B_converged >= 2:
                row["se_boot"] = v.se.tolist()
                row["se_mad"] = v.mad_se.tolist()
        rows.append(row)
    return rows


def _chunk(args):
    config, reps = args
    return [run_replicate(config, r) for r in reps]


def run_study(config: StudyConfig) -> list[dict]:
    """Replicate rows in (replicate, method) order, independent of ``workers``."""
    reps = list(range(config.replicates))
    w = max(1, int(config.workers))
    if w == 1 or len(reps) < 2:
        out = _chunk((config, reps))
    else:
        chunks = [reps[k::w] for k in range(w)]
        with ProcessPoolExecutor(max_workers=w) as pool:
            parts = list(pool.map(_chunk, [(config, c) for c in chunks]))
        by_rep = {r: rows for c, part in zip(chunks, parts) for r, rows in zip(c, part)}
        out = [by_rep[r] for r in reps]
    return [row for rows in out for row in rows]


def _coef_names(p: int) -> list[str]:
    return ["d"] + [f"x{j + 1}" for j in range(p)]


def _stat(values, fn):
    values = [v for v in values if v is not None]
    return fn(np.array(values), axis=0) if values else None


def summarize(rows: list[dict], config: StudyConfig) -> list[dict]:
    """One summary row per (method, coefficient)."""
    truth = np.asarray(config.sim_config(0).beta_complier, float)
    names = _coef_names(truth.size - 1)
    out = []
    for method in config.methods:
        mine = [r for r in rows if r["method"] == method]
        ok = [r for r in mine if r["converged"]]
        B = np.array([r["beta"] for r in ok]).reshape(-1, truth.size)
        for j, name in enumerate(names):
            b = B[:, j]
            s = {"method": method, "coef": name, "truth": float(truth[j]), "replicates": len(mine),
                 "converged": len(ok), "conv_rate": len(ok) / len(mine) if mine else float("nan")}
            s["mean"] = float(b.mean()) if b.size else float("nan")
            s["median"] = float(np.median(b)) if b.size else float("nan")
            s["bias"] = s["mean"] - truth[j]
            s["sd"] = float(b.std(ddof=1)) if b.size >= 2 else float("nan")
            s["mc_se"] = s["sd"] / np.sqrt(b.size) if b.size >= 2 else float("nan")
            for key in ("se_model", "se_analytic", "se_boot", "se_mad"):
                vals = np.array([r[key][j] for r in ok if key in r])
                s[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
                s[f"{key}_median"] = float(np.median(vals)) if vals.size else float("nan")
            # coverage with the bootstrap SE, else the analytic one, else the model one
            src = next((k for k in ("se_boot", "se_analytic", "se_model") if any(k in r for r in ok)), None)
            if src is None:
                s["coverage"], s["coverage_se"] = float("nan"), ""
            else:
                hits = [abs(r["beta"][j] - truth[j]) <= Z975 * r[src][j] for r in ok if src in r]
                s["coverage"] = float(np.mean(hits)) if hits else float("nan")
                s["coverage_se"] = src
            out.append(s)
    return out


SUMMARY_COLUMNS = ["method", "coef", "truth", "replicates", "converged", "conv_rate", "mean", "median", "bias",
                   "sd", "mc_se", "se_model_mean", "se_model_median", "se_analytic_mean", "se_analytic_median",
                   "se_boot_mean", "se_boot_median", "se_mad_mean", "se_mad_median", "coverage", "coverage_se"]


def replicate_table(rows: list[dict], p: int):
    names = _coef_names(p)
    header = ["replicate", "method", "converged", "failure", "score_norm", "B_converged", "B_attempted"]
    for key in ("beta", "se_model", "se_analytic", "se_boot", "se_mad"):
        header += [f"{key}_{n}" for n in names]
    table = []
    for r in rows:
        line = [r["replicate"], r["method"], int(r["converged"]), r["failure"], r.get("score_norm"),
                r.get("B_converged"), r.get("B_attempted")]
        for key in ("beta", "se_model", "se_analytic", "se_boot", "se_mad"):
            line += list(r[key]) if key in r else [None] * len(names)
        table.append(line)
    return header, table


def summary_table(summary: list[dict]):
    return SUMMARY_COLUMNS, [[s[c] for c in SUMMARY_COLUMNS] for s in summary]


def format_summary(summary: list[dict]) -> str:
    """Aligned text table of the main metrics."""
    cols = [("method", "method", "{}"), ("coef", "coef", "{}"), ("conv", "conv_rate", "{:.3f}"),
            ("mean", "mean", "{:.4f}"), ("median", "median", "{:.4f}"), ("bias", "bias", "{:+.4f}"),
            ("sd", "sd", "{:.4f}"), ("se.an", "se_analytic_median", "{:.4f}"),
            ("se.boot", "se_boot_median", "{:.4f}"), ("se.mad", "se_mad_median", "{:.4f}"),
            ("cover", "coverage", "{:.3f}")]

    def cell(s, key, f):
        v = s[key]
        if isinstance(v, float) and np.isnan(v):
            return "NA"
        return f.format(v)

    body = [[cell(s, k, f) for _, k, f in cols] for s in summary]
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, (h, _, _) in enumerate(cols)]
    lines = ["  ".join(h.rjust(w) for (h, _, _), w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
