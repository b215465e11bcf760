"""Command line front end.

    ivcox fit data.csv --method kappa_v_tr --variance bootstrap --B 200 --out run/
    ivcox bootstrap data.csv --method kappa_v_tr --B 200 --out run/
    ivcox simulate --scenario 1 --case 3 --replicates 200 --out sim/
    ivcox surface data.csv --method kappa --axis 0 --grid -2,2,81 --out surf/
    ivcox generate --scenario 1 --case 3 --seed 7 --out data.csv

Every option may also come from ``--config FILE`` (``key = value`` lines);
flags win.  Each run writes ``manifest.txt``, which is itself a valid config
file reproducing the run.  Exit status: 0 success, 2 convergence failure,
3 input error, 4 numeric degeneracy.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ivcox import io, phfit
from ivcox.data import (COMPETING_RISKS, MODES, RIGHT_CENSORED, TIE_POLICIES, build_counting_view, check,
                        design_matrix)
from ivcox.errors import InputError, InsufficientConvergence, IVCoxError, NoConvergence
from ivcox.phfit import FitOptions
from ivcox.pipeline import EstimatorConfig, analysis_data
from ivcox.simgen import SimConfig, generate, generate_extension
from ivcox.study import STUDY_METHODS, StudyConfig, format_summary, replicate_table, run_study, summarize, \
    summary_table
from ivcox.variance import analytic_variance, bootstrap_variance, default_workers
from ivcox.weights import DESIGN_POLICIES, METHODS, compute_weights, kappa_hat


def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _names(text):
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


# name -> (type, default, help, subcommands)
_ALL = ("fit", "bootstrap", "simulate", "surface", "generate")
_DATA = ("fit", "bootstrap", "surface")
_EST = ("fit", "bootstrap", "surface", "simulate")
OPTIONS = {
    "input": (str, None, "dataset CSV", _DATA),
    "out": (str, None, "output directory (output file for generate)", _ALL),
    "method": (str, "kappa_v_tr", f"weights: {', '.join(METHODS[:4])}", ("fit", "bootstrap", "surface")),
    "design_policy": (str, "second_order", f"projection design: {', '.join(DESIGN_POLICIES)}", _EST),
    "interval": (_floats, (0.01, 0.99), "truncation interval lo,hi", _EST),
    "nu": (float, 1e-4, "risk-set floor inside the log", _EST),
    "tol": (float, 0.05, "certification bound on the normalized score sup-norm", _EST),
    "mode": (str, RIGHT_CENSORED, f"data mode: {', '.join(MODES)}", _DATA),
    "cause": (_opt_int, None, "cause of interest (competing-risks mode)", _DATA),
    "ties": (str, "error", f"tied event times: {', '.join(TIE_POLICIES)}", _DATA),
    "ignore_extra": (_bool, False, "skip unknown CSV columns", _DATA),
    "variance": (str, "auto", "auto, none, analytic or bootstrap (auto: analytic for kappa, "
                 "bootstrap for kappa_v and kappa_v_tr, none for unit)", ("fit",)),
    "B": (int, 200, "bootstrap replicates", ("fit", "bootstrap", "simulate")),
    "seed": (int, 0, "random seed", _ALL),
    "workers": (int, None, "worker processes (default: available CPUs)", ("fit", "bootstrap", "simulate")),
    "scenario": (int, 1, "simulation scenario (1 or 2)", ("simulate", "generate")),
    "case": (int, 3, "simulation case (1-8)", ("simulate", "generate")),
    "n": (_opt_int, None, "override the case sample size", ("simulate", "generate")),
    "censoring_rate": (float, None, "override the censoring rate", ("simulate", "generate")),
    "replicates": (int, 200, "simulation replicates", ("simulate",)),
    "methods": (_names, STUDY_METHODS, "methods to compare", ("simulate",)),
    "bootstrap_methods": (_names, ("kappa_v_tr",), "methods that get bootstrap SEs", ("simulate",)),
    "analytic": (_bool, True, "analytic SEs for kappa", ("simulate",)),
    "extension": (str, None, "left-truncated, competing-risks or recurrent", ("generate",)),
    "axis": (_ints, (0,), "coefficient index(es) to vary", ("surface",)),
    "grid": (_floats, (-2.0, 2.0, 81.0), "lo,hi,steps", ("surface",)),
    "beta_fixed": (_floats, None, "values of the other coefficients (default: the fit)", ("surface",)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivcox", description="Complier causal hazard ratio estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in _ALL:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="key = value file; flags win")
        if cmd in _DATA:
            sp.add_argument("input_pos", nargs="?", default=None, metavar="INPUT")
        for name, (typ, _, hlp, cmds) in OPTIONS.items():
            if cmd in cmds:
                flag = "--" + (name if name == "B" else name.replace("_", "-"))
                sp.add_argument(flag, dest=name, type=typ, default=None, help=hlp)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags."""
    cmd = args.command
    conf = io.read_config(args.config) if args.config else {}
    out = {"command": cmd}
    for name, (typ, default, _, cmds) in OPTIONS.items():
        if cmd not in cmds:
            continue
        value = getattr(args, name, None)
        if name == "input" and getattr(args, "input_pos", None) is not None:
            value = args.input_pos
        if value is None and name in conf:
            try:
                value = typ(conf[name])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise InputError(f"config key {name!r}: {exc}") from None
        out[name] = default if value is None else value
    unknown = sorted(set(conf) - set(OPTIONS) - {"command"})
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    if conf.get("command", cmd) != cmd:
        raise InputError(f"config file is for '{conf['command']}', not '{cmd}'")
    _check_combination(out)
    return out


def _check_combination(c: dict):
    cmd = c["command"]
    if cmd in _DATA:
        if not c["input"]:
            raise InputError(f"{cmd} needs an input CSV")
        if c["mode"] not in MODES:
            raise InputError(f"unknown mode {c['mode']!r}")
        if c["cause"] is not None and c["mode"] != COMPETING_RISKS:
            raise InputError("--cause requires --mode competing-risks")
        if c["mode"] == COMPETING_RISKS and c["cause"] is None:
            raise InputError("--mode competing-risks requires --cause")
        if c["ties"] not in TIE_POLICIES:
            raise InputError(f"unknown tie policy {c['ties']!r}")
    if "method" in c and c["method"] not in METHODS[:4]:
        raise InputError(f"method must be one of {', '.join(METHODS[:4])}")
    if "design_policy" in c and c["design_policy"] not in DESIGN_POLICIES:
        raise InputError(f"unknown design policy {c['design_policy']!r}")
    if "interval" in c and len(c["interval"]) != 2:
        raise InputError("--interval takes lo,hi")
    if c.get("variance") not in (None, "auto", "none", "analytic", "bootstrap"):
        raise InputError("--variance must be auto, none, analytic or bootstrap")
    if cmd == "fit" and c["variance"] == "analytic" and c["method"] != "kappa":
        raise InputError("analytic variance is available for --method kappa only")
    if "B" in c and c["B"] < 2:
        raise InputError("--B must be at least 2")
    if cmd == "surface" and len(c["grid"]) != 3:
        raise InputError("--grid takes lo,hi,steps")
    if cmd == "generate" and not c["out"]:
        raise InputError("generate needs --out FILE")


def _manifest_dict(c: dict) -> dict:
    return {k: v for k, v in c.items() if k not in ("workers", "out")}


def _estimator(c: dict, method: str | None = None) -> EstimatorConfig:
    return EstimatorConfig(method=method or c["method"], design_policy=c["design_policy"],
                           interval=tuple(c["interval"]), fit_options=FitOptions(nu=c["nu"], tol=c["tol"]),
                           cause=c["cause"])


def load_dataset(c: dict):
    ds = io.read_csv(c["input"], mode=c["mode"], ignore_extra=c["ignore_extra"])
    return check(ds, ties=c["ties"], seed=c["seed"])


def _outdir(c: dict) -> Path | None:
    if not c.get("out"):
        return None
    p = Path(c["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _coef_names(p: int) -> list[str]:
    return ["treatment"] + [f"x{j + 1}" for j in range(p)]


def _comparator(data, Z, opts):
    view = build_counting_view(data, Z=Z)
    f = phfit.fit(view, np.ones(data.n), opts, method_tag="unit")
    return f.beta, np.sqrt(np.diag(phfit.model_covariance(f.beta, np.ones(data.n), view)))


def run_fit(c: dict, out=print) -> int:
    """First stage, weights, fit, optional variance, and the report."""
    ds = load_dataset(c)
    est_cfg = _estimator(c)
    data = analysis_data(ds, est_cfg.cause)
    view = build_counting_view(data)
    weights = compute_weights(data, est_cfg.method, est_cfg.design_policy, est_cfg.interval)
    names = _coef_names(data.p)
    status = 0
    try:
        fit = phfit.fit(view, weights, est_cfg.fit_options, method_tag=est_cfg.method)
    except NoConvergence as exc:
        fit, status = exc.fit, 2

    var, var_note = None, ""
    kind = c["variance"]
    if kind == "auto":
        kind = {"kappa": "analytic", "unit": "none"}.get(est_cfg.method, "bootstrap")
    if status == 0 and kind == "analytic":
        var = analytic_variance(data, fit, weights.propensity_fit, weights, view)
    elif status == 0 and kind == "bootstrap":
        try:
            var = bootstrap_variance(data, est_cfg, B=c["B"], seed=c["seed"],
                                     workers=c["workers"] or default_workers())
        except InsufficientConvergence as exc:
            var, status = exc.estimate, 2
            var_note = str(exc)

    d = _outdir(c)
    se = var.se if var is not None else np.full(len(names), np.nan)
    lo, hi = fit.beta - 1.959963984540054 * se, fit.beta + 1.959963984540054 * se
    rows = [[n, b, s, a, z, var.method if var else ""] for n, b, s, a, z in zip(names, fit.beta, se, lo, hi)]

    kap = kappa_hat(weights.propensity_fit, data) if weights.propensity_fit is not None else None
    V1 = data.instrument == 1
    share_treated = float(np.mean(data.treatment[V1])) if np.any(V1) else float("nan")
    p_never = float(np.mean(data.treatment[~V1])) if np.any(~V1) else float("nan")
    opts = est_cfg.fit_options
    at_b, at_se = _comparator(data, design_matrix(data), opts)
    Zitt = np.column_stack([data.instrument.astype(float), data.covariates])
    itt_b, itt_se = _comparator(data, Zitt, opts)

    lines = [f"method            {est_cfg.method}",
             f"n                 {data.n}  events {view.n_events}",
             f"converged         {fit.converged}  (score sup-norm {fit.score_norm:.4g}, tol {fit.tol:g}, "
             f"path {fit.path})",
             "",
             f"{'coef':<12}{'beta':>10}{'HR':>10}{'SE':>10}{'95% CI':>24}"]
    for n, b, s, a, z in zip(names, fit.beta, se, lo, hi):
        lines.append(f"{n:<12}{b:>10.4f}{np.exp(b):>10.4f}{s:>10.4f}   [{a:>8.4f}, {z:>8.4f}]")
    if var is not None:
        lines.append(f"SE from {var.method}"
                     + (f" ({var.B_converged}/{var.B_requested} converged, {var.B_attempted} attempts)"
                        if var.method == "bootstrap" else ""))
        if var.mad_se is not None:
            lines.append("MAD SE            " + "  ".join(f"{x:.4f}" for x in var.mad_se))
    if var_note:
        lines.append(var_note)
    lines += ["",
              f"complier share (mean kappa)          {np.mean(kap.values):.4f}" if kap is not None else
              "complier share (mean kappa)          NA",
              f"mean of the fitted weights           {np.mean(weights.values):.4f}",
              f"share treated when V=1 (p_c)         {share_treated:.4f}",
              f"share treated when V=0               {p_never:.4f}"]
    for k, v in sorted(weights.diagnostics.items()):
        lines.append(f"weights.{k}: {v}")
    lines += ["", "comparators (unit weights, model SE)"]
    for label, b, s in (("as-treated", at_b, at_se), ("ITT", itt_b, itt_se)):
        lines.append(f"  {label:<11}" + "  ".join(f"{n}={x:.4f} ({y:.4f})" for n, x, y in zip(names, b, s)))
    if status:
        lines.append("")
        lines.append("NOT CONVERGED: estimates are the best uncertified candidate")
    report = "\n".join(lines)
    out(report)

    if d is not None:
        io.write_table(d / "estimates.csv", ["coef", "beta", "se", "ci_lo", "ci_hi", "se_method"], rows)
        comp = [["as_treated", n, b, s] for n, b, s in zip(names, at_b, at_se)]
        comp += [["itt", n if n != "treatment" else "instrument", b, s] for n, b, s in zip(names, itt_b, itt_se)]
        io.write_table(d / "comparators.csv", ["analysis", "coef", "beta", "se_model"], comp)
        wrows = [[data.ids[i], int(data.treatment[i]), int(data.instrument[i]), weights.values[i],
                  kap.values[i] if kap is not None else None] for i in range(data.n)]
        io.write_table(d / "weights.csv", ["id", "treatment", "instrument", "weight", "kappa"], wrows)
        diag = [["converged", int(fit.converged)], ["score_norm", fit.score_norm], ["objective", fit.objective],
                ["path", fit.path], ["starts", len(fit.starts_tried)], ["mean_kappa", np.mean(kap.values)
                                                                         if kap is not None else None],
                ["mean_weight", np.mean(weights.values)], ["share_treated_v1", share_treated]]
        diag += [[f"weights.{k}", v] for k, v in sorted(weights.diagnostics.items())]
        io.write_table(d / "diagnostics.csv", ["key", "value"], diag)
        if var is not None and var.betas is not None:
            io.write_table(d / "replicates.csv", ["replicate"] + names,
                           [[i] + list(b) for i, b in enumerate(var.betas)])
        (d / "report.txt").write_text(report + "\n", encoding="utf-8")
        io.write_manifest(d / "manifest.txt", _manifest_dict(c))
    return status


def run_bootstrap(c: dict, out=print) -> int:
    c = dict(c, variance="bootstrap")
    return run_fit(c, out)


def run_simulation(c: dict, out=print) -> int:
    overrides = {}
    if c["n"] is not None:
        overrides["n"] = c["n"]
    if c["censoring_rate"] is not None:
        overrides["censoring_rate"] = c["censoring_rate"]
    cfg = StudyConfig(scenario=c["scenario"], case=c["case"], replicates=c["replicates"], seed=c["seed"],
                      methods=tuple(c["methods"]), bootstrap_methods=tuple(c["bootstrap_methods"]), B=c["B"],
                      analytic=c["analytic"], design_policy=c["design_policy"], interval=tuple(c["interval"]),
                      nu=c["nu"], tol=c["tol"], workers=c["workers"] or default_workers(),
                      sim_overrides=overrides)
    rows = run_study(cfg)
    summary = summarize(rows, cfg)
    text = format_summary(summary)
    out(f"scenario {cfg.scenario} case {cfg.case}, {cfg.replicates} replicates\n{text}")
    d = _outdir(c)
    if d is not None:
        p = len(cfg.sim_config(0).beta_complier) - 1
        io.write_table(d / "replicates.csv", *replicate_table(rows, p))
        io.write_table(d / "summary.csv", *summary_table(summary))
        (d / "summary.txt").write_text(text + "\n", encoding="utf-8")
        io.write_manifest(d / "manifest.txt", _manifest_dict(c))
    return 0


def run_surface(c: dict, out=print) -> int:
    ds = load_dataset(c)
    est_cfg = _estimator(c)
    data = analysis_data(ds, est_cfg.cause)
    view = build_counting_view(data)
    weights = compute_weights(data, est_cfg.method, est_cfg.design_policy, est_cfg.interval)
    if c["beta_fixed"] is not None:
        beta = np.asarray(c["beta_fixed"], float)
        if beta.size != data.p + 1:
            raise InputError(f"--beta-fixed needs {data.p + 1} values")
    else:
        try:
            beta = phfit.fit(view, weights, est_cfg.fit_options).beta
        except NoConvergence as exc:
            beta = exc.fit.beta
    lo, hi, steps = c["grid"]
    names = _coef_names(data.p)
    d = _outdir(c)
    for axis in c["axis"]:
        if not 0 <= axis < len(names):
            raise InputError(f"axis {axis} outside 0..{len(names) - 1}")
        table = phfit.surface(view, weights, axis, (lo, hi, int(steps)), beta, nu=est_cfg.fit_options.nu)
        header = [f"beta_{names[axis]}", "objective"] + [f"score_{n}" for n in names]
        changes = phfit.sign_changes(table[:, 2 + axis])
        out(f"axis {axis} ({names[axis]}): {table.shape[0]} points, "
            f"{changes} sign change(s) in the score, max objective at "
            f"{table[np.nanargmax(table[:, 1]), 0]:.4f}")
        if d is not None:
            io.write_table(d / f"surface_{names[axis]}.csv", header, table.tolist())
    if d is not None:
        io.write_manifest(d / "manifest.txt", _manifest_dict(c))
    return 0


def run_generate(c: dict, out=print) -> int:
    overrides = {}
    if c["n"] is not None:
        overrides["n"] = c["n"]
    if c["censoring_rate"] is not None:
        overrides["censoring_rate"] = c["censoring_rate"]
    cfg = SimConfig.from_case(c["scenario"], c["case"], seed=c["seed"], **overrides)
    oracle = generate_extension(cfg, c["extension"]) if c["extension"] else generate(cfg)
    path = io.write_csv(oracle.dataset, c["out"], oracle=io.oracle_columns(oracle))
    io.write_manifest(Path(path).with_suffix(".manifest.txt"), _manifest_dict(c))
    out(f"wrote {oracle.dataset.n} records to {path}")
    return 0


COMMANDS = {"fit": run_fit, "bootstrap": run_bootstrap, "simulate": run_simulation, "surface": run_surface,
            "generate": run_generate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve(args)
        return COMMANDS[config["command"]](config)
    except IVCoxError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
