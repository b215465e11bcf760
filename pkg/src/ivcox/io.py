"""CSV ingestion and output, run manifests and key=value config files.

Floats are written with ``repr`` so a written dataset reads back bit for bit.
"""

from __future__ import annotations

import csv
import platform
import re
from pathlib import Path

import numpy as np

from ivcox.data import COMPETING_RISKS, LEFT_TRUNCATED, MODES, RECURRENT, RIGHT_CENSORED, Dataset
from ivcox.errors import InputError, SchemaError

REQUIRED = ("time", "status", "treatment", "instrument")
OPTIONAL = ("id", "entry", "win_lo", "win_hi")
ORACLE_PREFIX = "oracle_"
_COVARIATE = re.compile(r"^x([1-9][0-9]*)$")
_EVENT = re.compile(r"^event_([1-9][0-9]*)$")


def fmt(value) -> str:
    """Shortest exact text for a number; empty for None and 'NA' for NaN."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "NA"
        return repr(v)
    return str(value)


def _classify(header, mode, ignore_extra):
    cov, events, oracle, unknown = {}, {}, [], []
    for k, name in enumerate(header):
        if name in REQUIRED or name in OPTIONAL:
            continue
        if m := _COVARIATE.match(name):
            cov[int(m.group(1))] = k
        elif m := _EVENT.match(name):
            events[int(m.group(1))] = k
        elif name.startswith(ORACLE_PREFIX):
            oracle.append(name)
        else:
            unknown.append(name)
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    dup = sorted({h for h in header if header.count(h) > 1})
    if dup:
        raise SchemaError(f"duplicate column(s): {', '.join(dup)}")
    if cov and sorted(cov) != list(range(1, len(cov) + 1)):
        raise SchemaError("covariate columns must be x1..xp without gaps")
    if events and sorted(events) != list(range(1, len(events) + 1)):
        raise SchemaError("event columns must be event_1..event_k without gaps")
    if unknown and not ignore_extra:
        raise SchemaError(f"unknown column(s): {', '.join(unknown)} (use --ignore-extra to skip)")
    if mode == LEFT_TRUNCATED and "entry" not in header:
        raise SchemaError("left-truncated mode needs an 'entry' column")
    if mode == RECURRENT and not ("win_lo" in header and "win_hi" in header):
        raise SchemaError("recurrent mode needs 'win_lo' and 'win_hi' columns")
    if mode != RECURRENT and (events or "win_lo" in header or "win_hi" in header):
        raise SchemaError("window and event_k columns are only allowed in recurrent mode")
    if mode != LEFT_TRUNCATED and "entry" in header:
        raise SchemaError("an 'entry' column needs left-truncated mode")
    return [cov[j] for j in sorted(cov)], [events[j] for j in sorted(events)], oracle


def read_csv(path, mode: str = RIGHT_CENSORED, ignore_extra: bool = False, keep_oracle: bool = False):
    """Parse a dataset file.

    Returns the :class:`Dataset`; with ``keep_oracle`` returns
    ``(dataset, {column: values})`` for the ``oracle_*`` columns, which are
    otherwise dropped.
    """
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}")
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row expected") from None
        cov_idx, ev_idx, oracle_cols = _classify(header, mode, ignore_extra)
        col = {h: k for k, h in enumerate(header)}
        rows, errors = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                errors.append(f"line {line}: {len(row)} fields, header has {len(header)}")
                continue
            rows.append((line, [c.strip() for c in row]))

    def num(line, name, text, kind):
        try:
            if kind is int:
                return int(text)
            v = float(text)
            return v
        except ValueError:
            errors.append(f"line {line}: column '{name}': cannot parse {text!r} as "
                          f"{'an integer' if kind is int else 'a decimal number'}")
            return 0 if kind is int else float("nan")

    n = len(rows)
    time = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    treat = np.empty(n, dtype=np.int64)
    instr = np.empty(n, dtype=np.int64)
    X = np.empty((n, len(cov_idx)))
    ids = []
    entry = np.empty(n) if "entry" in col else None
    window = np.empty((n, 2)) if mode == RECURRENT else None
    events = []
    oracle = {c: [] for c in oracle_cols}
    for r, (line, cells) in enumerate(rows):
        time[r] = num(line, "time", cells[col["time"]], float)
        status[r] = num(line, "status", cells[col["status"]], int)
        treat[r] = num(line, "treatment", cells[col["treatment"]], int)
        instr[r] = num(line, "instrument", cells[col["instrument"]], int)
        for j, k in enumerate(cov_idx):
            X[r, j] = num(line, header[k], cells[k], float)
        ids.append(cells[col["id"]] if "id" in col else str(r + 1))
        if entry is not None:
            entry[r] = num(line, "entry", cells[col["entry"]], float)
        if window is not None:
            window[r, 0] = num(line, "win_lo", cells[col["win_lo"]], float)
            window[r, 1] = num(line, "win_hi", cells[col["win_hi"]], float)
            ev = [num(line, header[k], cells[k], float) for k in ev_idx if cells[k] != ""]
            events.append(np.asarray(ev, float))
        for c in oracle_cols:
            oracle[c].append(cells[col[c]])
        if mode != COMPETING_RISKS and status[r] not in (0, 1):
            errors.append(f"line {line}: status {status[r]} is a cause code; only competing-risks "
                          f"mode accepts codes other than 0/1")
    if errors:
        shown = errors[:20] + ([f"... and {len(errors) - 20} more"] if len(errors) > 20 else [])
        raise SchemaError(f"{path}:\n  " + "\n  ".join(shown))
    n_causes = int(status.max(initial=1)) if mode == COMPETING_RISKS else 1
    ds = Dataset(time=time, status=status, treatment=treat, instrument=instr, covariates=X, ids=ids,
                 entry=entry, window=window, event_times=tuple(events) if window is not None else None,
                 mode=mode, n_causes=max(n_causes, 1))
    if keep_oracle:
        return ds, oracle
    return ds


def write_csv(dataset: Dataset, path, oracle: dict | None = None) -> Path:
    """Write ``dataset`` in the ingest format; ``oracle`` adds ``oracle_*`` columns."""
    header = ["id", "time", "status", "treatment", "instrument"]
    header += [f"x{j + 1}" for j in range(dataset.p)]
    if dataset.entry is not None:
        header.append("entry")
    k = 0
    if dataset.mode == RECURRENT:
        header += ["win_lo", "win_hi"]
        k = max((len(e) for e in dataset.event_times), default=0)
        header += [f"event_{j + 1}" for j in range(k)]
    oracle = oracle or {}
    header += [c if c.startswith(ORACLE_PREFIX) else ORACLE_PREFIX + c for c in oracle]
    rows = []
    for i in range(dataset.n):
        row = [dataset.ids[i], dataset.time[i], int(dataset.status[i]), int(dataset.treatment[i]),
               int(dataset.instrument[i])]
        row += list(dataset.covariates[i])
        if dataset.entry is not None:
            row.append(dataset.entry[i])
        if dataset.mode == RECURRENT:
            ev = list(dataset.event_times[i])
            row += [dataset.window[i, 0], dataset.window[i, 1]] + ev + [None] * (k - len(ev))
        row += [vals[i] for vals in oracle.values()]
        rows.append(row)
    return write_table(path, header, rows)


def oracle_columns(oracle_dataset) -> dict:
    from ivcox.simgen import CLASS_NAMES
    return {
        "oracle_class": [CLASS_NAMES[int(c)] for c in oracle_dataset.latent],
        "oracle_t0": oracle_dataset.t0,
        "oracle_t1": oracle_dataset.t1,
    }


def complier_labels(oracle: dict) -> np.ndarray | None:
    if "oracle_class" not in oracle:
        return None
    return np.array([c == "complier" for c in oracle["oracle_class"]])


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_config(path) -> dict:
    """Line-oriented ``key = value`` file; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such config file: {path}")
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def versions() -> dict:
    import scipy

    from ivcox import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "ivcox": __version__}


def write_manifest(path, config: dict) -> Path:
    """``key = value`` lines: the run configuration, then ``version.*`` entries.

    The configuration part is valid input for :func:`read_config`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {fmt(v) if not isinstance(v, (list, tuple)) else ','.join(fmt(x) for x in v)}"
             for k, v in config.items() if v is not None]
    lines += [f"# version.{k} = {v}" for k, v in versions().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
