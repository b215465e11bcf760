import numpy as np
import pytest

from ivcox.data import (COMPETING_RISKS, LEFT_TRUNCATED, RECURRENT, Dataset, SubjectRecord,
                        build_counting_view, check, recode_cause, resolve_ties, validate)
from ivcox.errors import InputError, ValidationError


def _ds(time, status, entry=None, mode="right-censored", **kw):
    n = len(time)
    return Dataset(time=time, status=status, treatment=kw.get("D", [0] * n), instrument=kw.get("V", [1] * n),
                   covariates=np.zeros((n, 1)), entry=entry, mode=mode, n_causes=kw.get("K", 1))


def test_valid_dataset_has_no_violations(small_data):
    assert validate(small_data) == []


def test_entry_equal_time_is_one_violation():
    ds = _ds([1.0, 2.0], [1, 0], entry=[0.5, 2.0], mode=LEFT_TRUNCATED)
    v = validate(ds)
    assert len(v) == 1
    assert v[0].rule == "entry < time required"
    assert v[0].record_id == "2"


def test_tied_event_times_reported_once():
    ds = _ds([1.0, 1.0, 3.0], [1, 1, 0])
    v = validate(ds)
    assert [x.rule for x in v] == ["tied event times"]
    assert validate(ds, ties="jitter") == []


def test_tie_with_censored_time_is_allowed():
    assert validate(_ds([1.0, 1.0], [1, 0])) == []


def test_jitter_breaks_ties_deterministically():
    ds = _ds([1.0, 1.0, 1.0, 2.0], [1, 1, 1, 0])
    a = check(ds, ties="jitter", seed=3)
    b = check(ds, ties="jitter", seed=3)
    assert np.array_equal(a.time, b.time)
    assert len(np.unique(a.time[:3])) == 3
    assert np.max(np.abs(a.time - ds.time)) <= 1e-9 * 2.0
    with pytest.raises(ValidationError):
        check(ds)


def test_invalid_fields():
    ds = Dataset(time=[-1.0, 1.0, 2.0], status=[1, 3, 0], treatment=[0, 2, 1], instrument=[1, 1, 0],
                 covariates=[[0.0], [np.nan], [1.0]])
    rules = sorted(v.rule for v in validate(ds))
    assert rules == sorted(["time must be finite and >= 0", "treatment must be 0 or 1",
                            "missing or non-finite covariate", "status must be 0 or 1"])


def test_left_truncated_mode_requires_entry():
    ds = _ds([1.0], [1], mode=LEFT_TRUNCATED)
    assert any("requires entry" in v.rule for v in validate(ds))


def test_recurrent_rules():
    ds = Dataset(time=[2.0, 3.0], status=[1, 1], treatment=[0, 1], instrument=[0, 1], covariates=[[0.0], [1.0]],
                 window=[[0.0, 2.0], [0.0, 3.0]], event_times=(np.array([0.5, 2.5]), np.array([])),
                 mode=RECURRENT)
    rules = sorted(v.rule for v in validate(ds))
    assert rules == ["recurrent event times must lie in (lo, hi]", "status must flag whether the window holds an event"]


def test_counting_view_examples():
    v = build_counting_view(_ds([2.0], [1]))
    assert v.triples() == [(0.0, 2.0, (2.0,))]
    v = build_counting_view(_ds([3.0], [0], entry=[1.0], mode=LEFT_TRUNCATED))
    assert v.triples() == [(1.0, 3.0, ())]
    cr = _ds([2.0], [2], mode=COMPETING_RISKS, K=2)
    assert build_counting_view(cr, cause=1).triples() == [(0.0, 2.0, ())]
    assert build_counting_view(cr, cause=2).triples() == [(0.0, 2.0, (2.0,))]


def test_counting_view_cause_errors():
    cr = _ds([2.0], [2], mode=COMPETING_RISKS, K=2)
    with pytest.raises(InputError):
        build_counting_view(cr)
    with pytest.raises(InputError):
        build_counting_view(cr, cause=3)
    with pytest.raises(InputError):
        build_counting_view(_ds([2.0], [1]), cause=1)


def test_competing_risk_event_counts_add_up():
    rng = np.random.default_rng(1)
    n = 50
    ds = Dataset(time=rng.uniform(0, 5, n), status=rng.integers(0, 4, n), treatment=rng.integers(0, 2, n),
                 instrument=rng.integers(0, 2, n), covariates=rng.normal(size=(n, 1)), mode=COMPETING_RISKS,
                 n_causes=3)
    total = sum(build_counting_view(ds, cause=k).n_events for k in (1, 2, 3))
    assert total == build_counting_view(recode_cause(ds, None)).n_events


def test_at_risk_nonincreasing(small_data):
    v = build_counting_view(small_data)
    counts = [v.at_risk(t).sum() for t in np.sort(small_data.time)]
    assert np.all(np.diff(counts) <= 0)


def test_counting_view_deterministic(small_data):
    a, b = build_counting_view(small_data), build_counting_view(small_data)
    assert a.triples() == b.triples()
    assert np.array_equal(a.grid, b.grid)


def test_records_round_trip(small_data):
    back = Dataset.from_records(small_data.records())
    assert np.array_equal(back.time, small_data.time)
    assert np.array_equal(back.covariates, small_data.covariates)
    assert isinstance(small_data.records()[0], SubjectRecord)


def test_dataset_is_immutable(small_data):
    with pytest.raises(ValueError):
        small_data.time[0] = 1.0


def test_resolve_ties_noop_without_ties(small_data):
    assert resolve_ties(small_data) is small_data
