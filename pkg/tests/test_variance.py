import numpy as np
import pytest

from ivcox import phfit
from ivcox.errors import InputError, InsufficientConvergence
from ivcox.firststage import fit_propensity
from ivcox.phfit import FitOptions
from ivcox.pipeline import EstimatorConfig, estimate
from ivcox.simgen import SimConfig, generate
from ivcox.variance import (analytic_variance, bootstrap_variance, dphi_dalpha, mad_se, normal_ci)
from oracles import kappa_formula


def test_mad_examples():
    assert mad_se([-1.0, 0.0, 1.0])[0] == pytest.approx(1.4826)
    assert mad_se([2.0, 2.0, 2.0])[0] == 0.0
    with pytest.raises(InputError):
        mad_se([1.0])


def test_mad_consistency_on_normal_draws():
    z = np.random.default_rng(0).standard_normal((10_000, 2))
    np.testing.assert_allclose(mad_se(z), 1.0, rtol=0.03)


@pytest.fixture(scope="module")
def small_sim():
    return generate(SimConfig.from_case(1, 1, seed=3))


def test_bootstrap_reproducible_and_psd(small_sim):
    a = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=20, seed=5)
    b = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=20, seed=5)
    assert np.array_equal(a.cov, b.cov) and np.array_equal(a.betas, b.betas)
    assert np.allclose(a.cov, a.cov.T)
    assert np.all(np.linalg.eigvalsh(a.cov) >= -1e-15)
    assert (a.B_requested, a.B_converged, a.B_attempted) == (20, 20, 20)
    assert a.method == "bootstrap"
    c = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=20, seed=6)
    assert not np.array_equal(a.betas, c.betas)


def test_bootstrap_parallel_matches_serial(small_sim):
    a = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=8, seed=9, workers=1)
    b = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=8, seed=9, workers=2)
    assert np.array_equal(a.betas, b.betas)


def test_identical_replicates_have_zero_variance():
    # a single-record dataset resamples to itself; unit weights on one event
    from ivcox.data import Dataset
    ds = Dataset(time=[1.0, 2.0], status=[1, 0], treatment=[1, 1], instrument=[1, 1], covariates=np.zeros((2, 0)))
    sub = ds.take([0, 0])
    betas = np.zeros((5, 1))
    assert mad_se(betas)[0] == 0.0
    assert sub.n == 2


def test_bootstrap_insufficient_convergence(small_sim):
    cfg = EstimatorConfig(method="kappa", fit_options=FitOptions(tol=1e-30))
    with pytest.raises(InsufficientConvergence) as exc:
        bootstrap_variance(small_sim.dataset, cfg, B=3, seed=1)
    est = exc.value.estimate
    assert est.B_converged == 0 and est.B_attempted == 9
    assert est.outlier_policy["failures"] == {"no_convergence": 9}


def test_bootstrap_mad_variant(small_sim):
    v = bootstrap_variance(small_sim.dataset, "kappa_v_tr", B=10, seed=2)
    m = v.with_mad()
    assert m.method == "bootstrap_mad"
    np.testing.assert_allclose(m.se, mad_se(v.betas))
    assert np.isnan(m.cov[0, 1])


def test_dphi_matches_finite_differences():
    rng = np.random.default_rng(4)
    n = 50
    X = rng.normal(size=(n, 2))
    D = rng.binomial(1, 0.5, n)
    V = rng.binomial(1, 0.5, n)
    alpha = np.array([0.2, -0.5, 0.7])
    A = np.column_stack([np.ones(n), X])

    def phi(a):
        return kappa_formula(D, V, 1 / (1 + np.exp(-(A @ a))))

    psi = 1 / (1 + np.exp(-(A @ alpha)))
    an = dphi_dalpha(D, V, psi, X)
    h = 1e-6
    fd = np.column_stack([(phi(alpha + h * e) - phi(alpha - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(an, fd, rtol=1e-6, atol=1e-9)


def test_analytic_matches_model_se_when_everyone_complies():
    o = generate(SimConfig.from_case(1, 3, seed=5, p_complier=1.0, n=2000))
    e = estimate(o.dataset, EstimatorConfig(method="kappa"))
    v = analytic_variance(e.dataset, e.fit, e.weights.propensity_fit, e.weights, e.view)
    model = np.sqrt(np.diag(phfit.model_covariance(e.beta, np.ones(e.view.n), e.view)))
    np.testing.assert_allclose(v.se, model, rtol=0.2)
    assert np.all(np.diag(v.cov) > 0)
    assert np.allclose(v.cov, v.cov.T)


def test_analytic_rejects_other_weights(small_sim):
    e = estimate(small_sim.dataset, EstimatorConfig(method="kappa_v_tr"))
    with pytest.raises(InputError):
        analytic_variance(e.dataset, e.fit, e.weights.propensity_fit, e.weights)


def test_analytic_propensity_term_is_not_trivial(small_sim):
    # with compliance below one the first-stage correction changes the SE
    e = estimate(small_sim.dataset, EstimatorConfig(method="kappa"))
    v = analytic_variance(e.dataset, e.fit, e.weights.propensity_fit, e.weights, e.view)
    assert v.outlier_policy["G2_norm"] < 1e-10
    assert np.all(v.se > 0)
    pf = fit_propensity(e.dataset.instrument, e.dataset.covariates)
    assert np.allclose(pf.alpha, e.weights.propensity_fit.alpha)


def test_normal_ci():
    lo, hi = normal_ci([0.0], [1.0])
    assert hi[0] == pytest.approx(1.959963984540054)
    assert lo[0] == -hi[0]


@pytest.mark.slow
def test_analytic_and_bootstrap_agree_in_scenario_one():
    ratios = []
    for s in range(100):
        o = generate(SimConfig.from_case(1, 3, seed=500 + s))
        try:
            e = estimate(o.dataset, EstimatorConfig(method="kappa"))
        except Exception:
            continue
        an = analytic_variance(e.dataset, e.fit, e.weights.propensity_fit, e.weights, e.view).se
        try:
            bs = bootstrap_variance(o.dataset, "kappa", B=50, seed=s).se
        except InsufficientConvergence as exc:
            bs = exc.estimate.se
        ratios.append(bs / an)
    assert np.all(np.abs(np.median(ratios, axis=0) - 1) < 0.2)
