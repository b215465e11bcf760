import math

import numpy as np
import pytest

from ivcox import phfit
from ivcox.data import COMPETING_RISKS, LEFT_TRUNCATED, RECURRENT, Dataset, build_counting_view
from ivcox.errors import DegenerateRiskSet, NoConvergence
from ivcox.phfit import FitOptions
from ivcox.pipeline import EstimatorConfig, estimate
from ivcox.simgen import SimConfig, generate, generate_extension
from ivcox.weights import compute_weights
from conftest import make_dataset
from oracles import breslow_increments, cox_loglik, cox_newton, cox_score_info


def _two():
    ds = Dataset(time=[1.0, 2.0], status=[1, 1], treatment=[1, 0], instrument=[1, 0], covariates=np.zeros((2, 0)))
    return build_counting_view(ds)


def test_risk_sums_examples():
    v = _two()
    s0, s1, s2 = phfit.risk_sums([0.0], 0.5, np.ones(2), v)
    assert s0 == 2.0
    s0, _, _ = phfit.risk_sums([0.0], 0.5, np.array([0.3, -1.1]), v)
    assert s0 == pytest.approx(-0.8)
    s0, s1, s2 = phfit.risk_sums([math.log(2)], 1.5, np.ones(2), build_counting_view(Dataset(
        time=[1.0, 2.0], status=[1, 1], treatment=[0, 1], instrument=[0, 1], covariates=np.zeros((2, 0)))))
    assert (s0, s1[0], s2[0, 0]) == pytest.approx((2.0, 2.0, 2.0))


def test_objective_and_score_two_subjects():
    v = _two()
    assert phfit.objective([0.0], np.ones(2), v) == pytest.approx(-0.5 * math.log(2), abs=1e-12)
    assert phfit.objective([0.3], np.zeros(2), v) == 0.0
    assert phfit.score([0.0], np.ones(2), v, normalized=False)[0] == pytest.approx(0.5)
    assert phfit.score([0.0], np.ones(2), v)[0] == pytest.approx(0.5 / math.sqrt(2))


def _triplet(ds):
    v = build_counting_view(ds)
    ev = np.zeros(v.n, bool)
    ev[v.event_subject] = True
    return v, v.entry, v.exit, ev, v.Z


def test_unit_objective_matches_textbook_partial_likelihood(small_data):
    v, entry, exit_, ev, Z = _triplet(small_data)
    for beta in ([0.0, 0.0, 0.0], [-0.4, 0.2, 0.1]):
        assert phfit.objective(beta, np.ones(v.n), v) * v.n == pytest.approx(
            cox_loglik(beta, entry, exit_, ev, Z), rel=1e-10)


def test_score_matches_textbook(small_data):
    v, entry, exit_, ev, Z = _triplet(small_data)
    w = np.random.default_rng(0).uniform(0.2, 1.5, v.n)
    U, _ = cox_score_info(np.array([0.1, -0.2, 0.3]), entry, exit_, ev, Z, w)
    np.testing.assert_allclose(phfit.score([0.1, -0.2, 0.3], w, v, normalized=False), U, rtol=1e-10)


def test_unit_fit_matches_textbook_newton(small_data):
    v, entry, exit_, ev, Z = _triplet(small_data)
    f = phfit.fit(v, np.ones(v.n))
    np.testing.assert_allclose(f.beta, cox_newton(entry, exit_, ev, Z), atol=1e-8)
    assert f.converged and f.path == "newton"


def test_left_truncated_fit_matches_textbook():
    rng = np.random.default_rng(5)
    base = make_dataset(n=150, seed=5)
    entry = rng.uniform(0, 0.5, base.n) * base.time
    ds = base.replace(entry=entry, mode=LEFT_TRUNCATED)
    v, e, x, ev, Z = _triplet(ds)
    np.testing.assert_allclose(phfit.fit(v, np.ones(v.n)).beta, cox_newton(e, x, ev, Z), atol=1e-8)


def test_breslow_matches_textbook(small_data):
    v, entry, exit_, ev, Z = _triplet(small_data)
    beta = np.array([-0.3, 0.1, 0.2])
    bh = phfit.breslow(v, np.ones(v.n), beta)
    t, inc = breslow_increments(beta, entry, exit_, ev, Z)
    np.testing.assert_allclose(bh.times, t)
    np.testing.assert_allclose(bh.increments, inc, rtol=1e-10)
    assert not bh.has_negative
    assert np.all(np.diff(bh.cumulative) >= 0)
    scaled = phfit.breslow(v, 3.0 * np.ones(v.n), beta)
    np.testing.assert_allclose(scaled.increments, bh.increments, rtol=1e-12)


def test_breslow_single_subject():
    ds = Dataset(time=[1.0], status=[1], treatment=[0], instrument=[0], covariates=np.zeros((1, 0)))
    bh = phfit.breslow(build_counting_view(ds), np.ones(1), [0.0])
    assert bh.increments.tolist() == [1.0]
    assert bh.at([0.5, 1.0, 2.0]).tolist() == [0.0, 1.0, 1.0]


def test_score_scales_with_weights(small_data):
    v = build_counting_view(small_data)
    w = compute_weights(small_data, "kappa").values
    u = phfit.score([0.1, 0.0, -0.1], w, v)
    np.testing.assert_allclose(phfit.score([0.1, 0.0, -0.1], 2.5 * w, v), 2.5 * u, rtol=1e-12)


def test_degenerate_risk_set_under_signed_weights():
    ds = Dataset(time=[1.0, 2.0], status=[1, 1], treatment=[1, 0], instrument=[1, 1], covariates=np.zeros((2, 0)))
    v = build_counting_view(ds)
    with pytest.raises(DegenerateRiskSet):
        phfit.score([0.0], np.array([1.0, -1.0]), v)


def test_all_zero_weights_raise(small_data):
    with pytest.raises(NoConvergence):
        phfit.fit(build_counting_view(small_data), np.zeros(small_data.n))


def test_all_compliers_kappa_equals_textbook_cox():
    o = generate(SimConfig.from_case(1, 1, seed=8, p_complier=1.0, n=400))
    v, entry, exit_, ev, Z = _triplet(o.dataset)
    w = compute_weights(o.dataset, "kappa")
    assert np.all(w.values == 1.0)
    np.testing.assert_allclose(phfit.fit(v, w).beta, cox_newton(entry, exit_, ev, Z), atol=1e-6)


def test_signed_fit_is_certified_and_reports_candidates(case3):
    v = build_counting_view(case3.dataset)
    f = phfit.fit(v, compute_weights(case3.dataset, "kappa"))
    assert f.path == "bfgs"
    assert len(f.starts_tried) == 3
    assert f.score_norm <= f.tol
    assert f.objective == max(c["objective"] for c in f.starts_tried if c["certified"])


def test_no_convergence_carries_best_candidate(case3):
    v = build_counting_view(case3.dataset)
    w = compute_weights(case3.dataset, "kappa")
    with pytest.raises(NoConvergence) as exc:
        phfit.fit(v, w, FitOptions(tol=1e-30, polish=False, max_iter=3))
    assert exc.value.fit is not None and not exc.value.fit.converged
    assert np.all(np.isfinite(exc.value.fit.beta))


def test_surface_unit_weights_concave_with_single_sign_change(small_data):
    v = build_counting_view(small_data)
    f = phfit.fit(v, np.ones(v.n))
    tab = phfit.surface(v, np.ones(v.n), 0, (-2, 2, 81), f.beta)
    assert tab.shape == (81, 5)
    assert np.all(np.diff(tab[:, 1], 2) <= 1e-8)
    assert phfit.sign_changes(tab[:, 2]) == 1
    k = int(np.argmax(tab[:, 1]))
    assert abs(tab[k, 0] - f.beta[0]) <= 4 / 80


def test_reductions_are_bit_identical():
    cfg = SimConfig.from_case(1, 1, seed=21)
    rc = estimate(generate(cfg).dataset, EstimatorConfig(method="kappa_v_tr")).beta
    lt = generate_extension(cfg.with_(truncation_quantile=0.0), LEFT_TRUNCATED).dataset
    assert np.array_equal(estimate(lt, EstimatorConfig(method="kappa_v_tr")).beta, rc)
    cr = generate_extension(cfg.with_(cause2_rate=0.0), COMPETING_RISKS).dataset
    assert np.array_equal(estimate(cr, EstimatorConfig(method="kappa_v_tr", cause=1)).beta, rc)
    rec = generate_extension(cfg.with_(recurrent_window="first_event"), RECURRENT).dataset
    assert np.array_equal(estimate(rec, EstimatorConfig(method="kappa_v_tr")).beta, rc)


def test_competing_risks_equals_recoded_right_censored():
    cfg = SimConfig.from_case(1, 1, seed=22)
    cr = generate_extension(cfg, COMPETING_RISKS).dataset
    for cause in (1, 2):
        recoded = Dataset(time=cr.time, status=(cr.status == cause).astype(int), treatment=cr.treatment,
                          instrument=cr.instrument, covariates=cr.covariates)
        a = estimate(cr, EstimatorConfig(method="kappa", cause=cause)).beta
        b = estimate(recoded, EstimatorConfig(method="kappa")).beta
        assert np.array_equal(a, b)


def test_consistency_error_shrinks_with_n():
    err = {}
    for n in (1000, 4000):
        e = []
        for s in range(20):
            o = generate(SimConfig.from_case(1, 3, seed=100 + s, n=n))
            e.append(np.abs(estimate(o.dataset, EstimatorConfig(method="kappa_v_tr")).beta - [-0.5, -0.2]).mean())
        err[n] = np.mean(e)
    assert err[4000] < err[1000]
