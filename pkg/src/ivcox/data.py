"""Domain types, validation and the counting-process view of a dataset.

A :class:`Dataset` stores one row per subject in column arrays.  Every fitter
consumes a :class:`CountingView`, which reduces all four observation schemes
(right censoring, left truncation, one cause of a competing-risks outcome,
recurrent events in a window) to the same triple: an at-risk interval
``(entry, exit]`` per subject and a flat list of event times with the subject
that owns each event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ivcox.errors import InputError, ValidationError

RIGHT_CENSORED = "right-censored"
LEFT_TRUNCATED = "left-truncated"
COMPETING_RISKS = "competing-risks"
RECURRENT = "recurrent"
MODES = (RIGHT_CENSORED, LEFT_TRUNCATED, COMPETING_RISKS, RECURRENT)

TIE_POLICIES = ("error", "jitter")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    time: float
    status: int
    treatment: int
    instrument: int
    covariates: tuple[float, ...]
    entry: float | None = None
    window: tuple[float, float] | None = None
    event_times: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Violation:
    record_id: str
    rule: str

    def __str__(self):
        return f"record {self.record_id}: {self.rule}"


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented container of subject records.

    ``status`` is the event indicator (0/1), or the cause label ``0..n_causes``
    in competing-risks mode.  In recurrent mode it flags whether the window
    holds at least one event, ``window`` is an ``(n, 2)`` array of ``(lo, hi]``
    bounds and ``event_times`` one sorted array per subject.
    """

    time: np.ndarray
    status: np.ndarray
    treatment: np.ndarray
    instrument: np.ndarray
    covariates: np.ndarray
    ids: np.ndarray | None = None
    entry: np.ndarray | None = None
    window: np.ndarray | None = None
    event_times: tuple | None = None
    mode: str = RIGHT_CENSORED
    n_causes: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("time", _frozen(self.time, float))
        n = self.time.shape[0]
        set_("status", _frozen(self.status, np.int64))
        set_("treatment", _frozen(self.treatment, np.int64))
        set_("instrument", _frozen(self.instrument, np.int64))
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 0)
        set_("covariates", _frozen(cov))
        if self.ids is None:
            set_("ids", _frozen(np.array([str(i + 1) for i in range(n)], dtype=object)))
        else:
            set_("ids", _frozen(np.asarray(self.ids, dtype=object)))
        if self.entry is not None:
            set_("entry", _frozen(self.entry, float))
        if self.window is not None:
            set_("window", _frozen(np.asarray(self.window, dtype=float).reshape(n, 2)))
        if self.event_times is not None:
            set_("event_times", tuple(_frozen(e, float) for e in self.event_times))
        for name in ("status", "treatment", "instrument", "covariates", "ids"):
            if getattr(self, name).shape[0] != n:
                raise InputError(f"column {name!r} has length {getattr(self, name).shape[0]}, expected {n}")

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1]) if self.covariates.ndim == 2 else 0

    @property
    def event(self) -> np.ndarray:
        """Indicator of an observed event of any cause."""
        return (self.status != 0).astype(np.int64)

    def records(self) -> list[SubjectRecord]:
        out = []
        for i in range(self.n):
            out.append(SubjectRecord(
                id=str(self.ids[i]),
                time=float(self.time[i]),
                status=int(self.status[i]),
                treatment=int(self.treatment[i]),
                instrument=int(self.instrument[i]),
                covariates=tuple(float(x) for x in self.covariates[i]),
                entry=None if self.entry is None else float(self.entry[i]),
                window=None if self.window is None else (float(self.window[i, 0]), float(self.window[i, 1])),
                event_times=None if self.event_times is None else tuple(float(t) for t in self.event_times[i]),
            ))
        return out

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], mode: str = RIGHT_CENSORED,
                     n_causes: int | None = None) -> "Dataset":
        records = list(records)
        p = len(records[0].covariates) if records else 0
        if any(len(r.covariates) != p for r in records):
            raise InputError("covariate vectors differ in length")
        has_entry = any(r.entry is not None for r in records)
        has_window = any(r.window is not None for r in records)
        has_events = any(r.event_times is not None for r in records)
        status = np.array([r.status for r in records], dtype=np.int64)
        if n_causes is None:
            n_causes = int(status.max(initial=1)) if mode == COMPETING_RISKS else 1
        return cls(
            time=[r.time for r in records],
            status=status,
            treatment=[r.treatment for r in records],
            instrument=[r.instrument for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            ids=[r.id for r in records],
            entry=[np.nan if r.entry is None else r.entry for r in records] if has_entry else None,
            window=[(np.nan, np.nan) if r.window is None else r.window for r in records] if has_window else None,
            event_times=tuple(np.asarray(r.event_times or (), float) for r in records) if has_events else None,
            mode=mode,
            n_causes=n_causes,
        )

    def take(self, idx) -> "Dataset":
        """Rows ``idx`` (with repetition allowed) as a new dataset."""
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            time=self.time[idx],
            status=self.status[idx],
            treatment=self.treatment[idx],
            instrument=self.instrument[idx],
            covariates=self.covariates[idx],
            ids=self.ids[idx],
            entry=None if self.entry is None else self.entry[idx],
            window=None if self.window is None else self.window[idx],
            event_times=None if self.event_times is None else tuple(self.event_times[i] for i in idx),
            mode=self.mode,
            n_causes=self.n_causes,
        )

    def replace(self, **changes) -> "Dataset":
        fields_ = dict(
            time=self.time, status=self.status, treatment=self.treatment,
            instrument=self.instrument, covariates=self.covariates, ids=self.ids,
            entry=self.entry, window=self.window, event_times=self.event_times,
            mode=self.mode, n_causes=self.n_causes,
        )
        fields_.update(changes)
        return Dataset(**fields_)


def recode_cause(dataset: Dataset, cause: int | None = None) -> Dataset:
    """Right-censored dataset with event indicator ``I(status == cause)``.

    With ``cause=None`` the indicator is ``I(status != 0)``, the view of the
    minimal failure time.  Failures from other causes become censorings.
    """
    if dataset.mode != COMPETING_RISKS:
        raise InputError("recode_cause needs a competing-risks dataset")
    if cause is None:
        status = (dataset.status != 0)
    else:
        if not 1 <= cause <= dataset.n_causes:
            raise InputError(f"cause {cause} outside 1..{dataset.n_causes}")
        status = (dataset.status == cause)
    return dataset.replace(status=status.astype(np.int64), mode=RIGHT_CENSORED, n_causes=1)


def projection_outcome(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """The (time, event indicator) pair entering U = (W, delta, D, X).

    Recurrent subjects use the window end and whether any event was seen.
    """
    if dataset.mode == RECURRENT:
        return dataset.window[:, 1], np.array([len(e) > 0 for e in dataset.event_times], dtype=np.int64)
    return dataset.time, dataset.event


def _event_times_for_ties(dataset: Dataset):
    if dataset.mode == RECURRENT:
        if not dataset.event_times:
            return np.empty(0), np.empty(0, dtype=np.intp)
        owners = np.concatenate([np.full(len(e), i, dtype=np.intp) for i, e in enumerate(dataset.event_times)])
        times = np.concatenate([np.asarray(e, float) for e in dataset.event_times]) if owners.size else np.empty(0)
        return times, owners
    owners = np.flatnonzero(dataset.status != 0)
    return dataset.time[owners], owners


def _tie_groups(dataset: Dataset):
    times, owners = _event_times_for_ties(dataset)
    if times.size < 2:
        return []
    order = np.argsort(times, kind="stable")
    st = times[order]
    if not np.any(st[1:] == st[:-1]):
        return []
    _, first, counts = np.unique(st, return_index=True, return_counts=True)
    return [owners[order[f:f + c]] for f, c in zip(first, counts) if c > 1]


def validate(dataset: Dataset, ties: str = "error") -> list[Violation]:
    """All invariant violations; an empty list means the dataset is usable.

    With ``ties="jitter"`` tied event times are not reported, since
    :func:`resolve_ties` will break them.
    """
    if ties not in TIE_POLICIES:
        raise InputError(f"unknown tie policy {ties!r}")
    out: list[Violation] = []
    ids = dataset.ids
    mode = dataset.mode

    def add(i, rule):
        out.append(Violation(str(ids[i]), rule))

    for i in np.flatnonzero(~np.isfinite(dataset.time) | (dataset.time < 0)):
        add(i, "time must be finite and >= 0")
    for name in ("treatment", "instrument"):
        col = getattr(dataset, name)
        for i in np.flatnonzero((col != 0) & (col != 1)):
            add(i, f"{name} must be 0 or 1")
    if dataset.p:
        for i in np.flatnonzero(~np.all(np.isfinite(dataset.covariates), axis=1)):
            add(i, "missing or non-finite covariate")

    if mode == COMPETING_RISKS:
        bad = (dataset.status < 0) | (dataset.status > dataset.n_causes)
        for i in np.flatnonzero(bad):
            add(i, f"status must be a cause code in 0..{dataset.n_causes}")
    else:
        for i in np.flatnonzero((dataset.status != 0) & (dataset.status != 1)):
            add(i, "status must be 0 or 1")

    if mode == LEFT_TRUNCATED and dataset.entry is None:
        out.append(Violation("*", "left-truncated mode requires entry times"))
    if dataset.entry is not None:
        e = dataset.entry
        for i in np.flatnonzero(~np.isfinite(e) | (e < 0)):
            add(i, "entry must be finite and >= 0")
        for i in np.flatnonzero(np.isfinite(e) & (e >= dataset.time)):
            add(i, "entry < time required")

    if mode == RECURRENT:
        if dataset.window is None or dataset.event_times is None:
            out.append(Violation("*", "recurrent mode requires a window and event times"))
        else:
            for i in range(dataset.n):
                lo, hi = dataset.window[i]
                ev = dataset.event_times[i]
                if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo < hi):
                    add(i, "window must satisfy 0 <= lo < hi")
                    continue
                if ev.size and (np.any(ev <= lo) or np.any(ev > hi)):
                    add(i, "recurrent event times must lie in (lo, hi]")
                if ev.size > 1 and np.any(np.diff(ev) <= 0):
                    add(i, "recurrent event times must be strictly increasing")
                if int(dataset.status[i]) != int(ev.size > 0):
                    add(i, "status must flag whether the window holds an event")

    if ties == "error":
        for group in _tie_groups(dataset):
            out.append(Violation(",".join(str(ids[i]) for i in group), "tied event times"))
    return out


def check(dataset: Dataset, ties: str = "error", seed: int = 0) -> Dataset:
    """Validate, apply the tie policy, and return the usable dataset.

    Raises :class:`ValidationError` listing every violation.
    """
    violations = validate(dataset, ties=ties)
    if violations:
        raise ValidationError(violations)
    if ties == "jitter":
        dataset = resolve_ties(dataset, seed=seed)
    return dataset


def resolve_ties(dataset: Dataset, seed: int = 0, scale: float = 1e-9) -> Dataset:
    """Break tied event times with seeded uniform noise of size ``scale * max(time)``."""
    groups = _tie_groups(dataset)
    if not groups:
        return dataset
    rng = np.random.default_rng(seed)
    mag = scale * float(np.max(dataset.time))
    if dataset.mode == RECURRENT:
        events = [np.array(e, float) for e in dataset.event_times]
        for group in groups:
            for i in group:
                events[i] = np.sort(events[i] + rng.uniform(-mag, mag, size=events[i].size))
        return dataset.replace(event_times=tuple(events))
    time = np.array(dataset.time)
    for group in groups:
        time[group] += rng.uniform(-mag, mag, size=len(group))
    return dataset.replace(time=time)


@dataclass(frozen=True, eq=False)
class CountingView:
    """At-risk intervals ``(entry, exit]`` and event list over a covariate matrix.

    ``Z`` holds the regression design ``(D, X)``.  ``grid`` is the sorted set of
    distinct event times; the ``pos_*`` arrays index reverse cumulative sums
    so that risk-set sums at every grid time cost one sort.
    """

    entry: np.ndarray
    exit: np.ndarray
    Z: np.ndarray
    event_subject: np.ndarray
    event_time: np.ndarray
    grid: np.ndarray = field(init=False)
    event_grid: np.ndarray = field(init=False)
    exit_order: np.ndarray = field(init=False)
    entry_order: np.ndarray = field(init=False)
    pos_exit: np.ndarray = field(init=False)
    pos_entry: np.ndarray | None = field(init=False)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        for name in ("entry", "exit", "Z", "event_time"):
            set_(name, _frozen(getattr(self, name), float))
        set_("event_subject", _frozen(self.event_subject, np.intp))
        grid = np.unique(self.event_time)
        set_("grid", _frozen(grid))
        set_("event_grid", _frozen(np.searchsorted(grid, self.event_time), np.intp))
        exit_order = np.argsort(self.exit, kind="stable")
        set_("exit_order", _frozen(exit_order, np.intp))
        set_("pos_exit", _frozen(np.searchsorted(self.exit[exit_order], grid, side="left"), np.intp))
        if grid.size and self.entry.size and np.max(self.entry) >= grid[0]:
            entry_order = np.argsort(self.entry, kind="stable")
            set_("entry_order", _frozen(entry_order, np.intp))
            set_("pos_entry", _frozen(np.searchsorted(self.entry[entry_order], grid, side="left"), np.intp))
        else:
            set_("entry_order", _frozen(np.empty(0, np.intp)))
            set_("pos_entry", None)

    @property
    def n(self) -> int:
        return int(self.exit.shape[0])

    @property
    def n_events(self) -> int:
        return int(self.event_time.shape[0])

    def at_risk(self, t: float) -> np.ndarray:
        """Y_i(t) for every subject."""
        return ((self.entry < t) & (t <= self.exit)).astype(np.int64)

    def triples(self) -> list[tuple[float, float, tuple[float, ...]]]:
        events: list[list[float]] = [[] for _ in range(self.n)]
        for s, t in zip(self.event_subject, self.event_time):
            events[int(s)].append(float(t))
        return [(float(a), float(b), tuple(sorted(e))) for a, b, e in zip(self.entry, self.exit, events)]


def design_matrix(dataset: Dataset) -> np.ndarray:
    """Z = (D, X) with the treatment in column 0."""
    return np.column_stack([dataset.treatment.astype(float), dataset.covariates]) if dataset.p else \
        dataset.treatment.astype(float).reshape(-1, 1)


def build_counting_view(dataset: Dataset, cause: int | None = None,
                        Z: np.ndarray | None = None) -> CountingView:
    """Reduce ``dataset`` to at-risk intervals and events.

    ``cause`` is required in competing-risks mode and rejected otherwise;
    failures from other causes are encoded as censorings.  ``Z`` overrides
    the default ``(D, X)`` design, e.g. ``(V, X)`` for an intention-to-treat
    comparator.
    """
    mode = dataset.mode
    if mode == COMPETING_RISKS:
        if cause is None:
            raise InputError("competing-risks mode needs a cause")
        dataset = recode_cause(dataset, cause)
    elif cause is not None:
        raise InputError("cause is only meaningful in competing-risks mode")
    if Z is None:
        Z = design_matrix(dataset)
    n = dataset.n
    if mode == RECURRENT:
        entry = dataset.window[:, 0]
        exit_ = dataset.window[:, 1]
        sizes = [len(e) for e in dataset.event_times]
        subj = np.repeat(np.arange(n), sizes)
        etime = np.concatenate([np.asarray(e, float) for e in dataset.event_times]) if n else np.empty(0)
    else:
        entry = dataset.entry if mode == LEFT_TRUNCATED else np.zeros(n)
        exit_ = dataset.time
        subj = np.flatnonzero(dataset.status == 1)
        etime = dataset.time[subj]
    return CountingView(entry=entry, exit=exit_, Z=Z, event_subject=subj, event_time=etime)


def concat(datasets: Iterable[Dataset]) -> Dataset:
    ds = list(datasets)
    first = ds[0]
    return Dataset(
        time=np.concatenate([d.time for d in ds]),
        status=np.concatenate([d.status for d in ds]),
        treatment=np.concatenate([d.treatment for d in ds]),
        instrument=np.concatenate([d.instrument for d in ds]),
        covariates=np.concatenate([d.covariates for d in ds]),
        ids=np.concatenate([d.ids for d in ds]),
        entry=None if first.entry is None else np.concatenate([d.entry for d in ds]),
        window=None if first.window is None else np.concatenate([d.window for d in ds]),
        event_times=None if first.event_times is None else sum((d.event_times for d in ds), ()),
        mode=first.mode,
        n_causes=first.n_causes,
    )
