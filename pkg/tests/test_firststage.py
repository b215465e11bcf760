import math

import numpy as np
import pytest

from ivcox.errors import InputError, Separation, Singular
from ivcox.firststage import (DesignSpec, LogisticFit, fit_logistic, fit_propensity, influence_alpha,
                              influence_matrix, predict_prob)
from ivcox.data import Dataset
from oracles import logistic_irls


def _intercept(n):
    return np.ones((n, 1))


def test_intercept_only_examples():
    assert fit_logistic([1, 0, 1, 0], _intercept(4)).alpha[0] == pytest.approx(0.0, abs=1e-12)
    assert fit_logistic([1, 1, 1, 0], _intercept(4)).alpha[0] == pytest.approx(math.log(3), abs=1e-10)


def test_perfect_separation_raises():
    with pytest.raises(Separation):
        fit_logistic([0, 0, 1, 1], np.column_stack([np.ones(4), [-1, -1, 1, 1]]))


def test_quasi_complete_separation_raises():
    x = [-2, -1, 0, 0, 1, 2]
    with pytest.raises(Separation):
        fit_logistic([0, 0, 0, 1, 1, 1], np.column_stack([np.ones(6), x]))


def test_finite_mle_with_extreme_fitted_rows_is_accepted():
    # one far-out row gets |eta| >> 30 at the MLE, which is still finite
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(size=300), [40.0]])
    y = (rng.uniform(size=301) < 1 / (1 + np.exp(-x))).astype(float)
    y[-1] = 1.0
    fit = fit_logistic(y, np.column_stack([np.ones(301), x]))
    assert fit.converged
    assert fit.n_extreme >= 1
    np.testing.assert_allclose(fit.alpha, logistic_irls(y, np.column_stack([np.ones(301), x])), atol=1e-8)


def test_singular_design_raises():
    X = np.column_stack([np.ones(6), [1, 2, 3, 4, 5, 6], [2, 4, 6, 8, 10, 12]])
    with pytest.raises(Singular):
        fit_logistic([0, 1, 0, 1, 1, 0], X)


def test_matches_independent_irls():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
    y = (rng.uniform(size=500) < 1 / (1 + np.exp(-(X @ [0.3, -1.0, 0.5])))).astype(float)
    fit = fit_logistic(y, X)
    assert fit.converged and fit.score_norm < 1e-8
    np.testing.assert_allclose(fit.alpha, logistic_irls(y, X), atol=1e-9)
    assert np.allclose(fit.info, fit.info.T)
    assert np.all(np.linalg.eigvalsh(fit.info) >= 0)


def test_predict_prob_examples():
    spec = DesignSpec("linear", 1)
    fit = LogisticFit(np.array([0.0, 1.0]), np.eye(2), True, 0.0, spec, 1.0, 0.0, 0)
    assert predict_prob(fit, [0.0]) == 0.5
    spec0 = DesignSpec("linear", 0)
    f0 = LogisticFit(np.array([0.0]), np.eye(1), True, 0.0, spec0, 1.0, 0.0, 0)
    assert predict_prob(f0, []) == 0.5
    f3 = LogisticFit(np.array([math.log(3)]), np.eye(1), True, 0.0, spec0, 1.0, 0.0, 0)
    assert predict_prob(f3, []) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(InputError):
        predict_prob(fit, [0.0, 1.0])


def test_predict_prob_is_clamped():
    spec = DesignSpec("linear", 1)
    fit = LogisticFit(np.array([0.0, 1.0]), np.eye(2), True, 0.0, spec, 1.0, 0.0, 0)
    assert predict_prob(fit, [100.0]) == 1 - 1e-12
    assert predict_prob(fit, [-100.0]) == 1e-12


def test_influence_sums_to_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 1))
    v = (rng.uniform(size=200) < 1 / (1 + np.exp(-x[:, 0]))).astype(int)
    fit = fit_propensity(v, x)
    inf = influence_matrix(fit, v, x)
    assert np.max(np.abs(inf.sum(axis=0))) < 1e-6


def test_influence_two_records_antisymmetric():
    fit = fit_propensity([1, 0], np.zeros((2, 0)))
    inf = influence_matrix(fit, [1, 0], np.zeros((2, 0)))
    assert inf[0, 0] == pytest.approx(2.0)
    assert inf[1, 0] == pytest.approx(-2.0)


def test_influence_matches_weight_perturbation():
    rng = np.random.default_rng(4)
    n = 200
    x = rng.uniform(-1, 1, size=(n, 1))
    v = (rng.uniform(size=n) < 1 / (1 + np.exp(-x[:, 0]))).astype(int)
    base = fit_propensity(v, x)
    eps = 1e-5
    for i in (0, 17, 123):
        w = np.ones(n)
        w[i] += eps
        # the perturbed fit solves the score with weight 1+eps on record i over n records
        pert = fit_propensity(v, x, weights=w)
        fd = (pert.alpha - base.alpha) / eps
        ds = Dataset(time=np.ones(n), status=np.zeros(n, int), treatment=v, instrument=v, covariates=x)
        inf = influence_alpha(base, ds.records()[i])
        np.testing.assert_allclose(fd, inf / n, rtol=1e-3, atol=1e-7)


def test_large_sample_recovers_alpha():
    rng = np.random.default_rng(5)
    n = 100_000
    x = rng.uniform(-1, 1, size=(n, 1))
    v = (rng.uniform(size=n) < 1 / (1 + np.exp(-x[:, 0]))).astype(int)
    fit = fit_propensity(v, x)
    se = np.sqrt(np.diag(np.linalg.inv(fit.info)))
    assert np.all(np.abs(fit.alpha - [0.0, 1.0]) < 3 * se)


def test_loglik_nondecreasing_along_iterations():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.ones(300), rng.normal(size=300) * 3])
    y = (rng.uniform(size=300) < 1 / (1 + np.exp(-2 * X[:, 1]))).astype(float)
    lls = []
    import ivcox.firststage as fs
    orig = fs._loglik

    def spy(yy, w, eta):
        val = orig(yy, w, eta)
        lls.append(val)
        return val

    fs._loglik = spy
    try:
        fit = fs.fit_logistic(y, X)
    finally:
        fs._loglik = orig
    assert fit.converged
    # the accepted values are the running maxima; the final one is the best seen
    assert fit.loglik == pytest.approx(max(lls))


def test_design_spec_terms():
    raw = np.column_stack([[1.0, 2.0, 3.0], [0.1, 0.2, 0.3], [0, 1, 1]])
    spec = DesignSpec.for_data("second_order", raw)
    assert spec.names() == ["(intercept)", "W", "x1", "x2", "W^2", "x1^2", "W*x1", "W*x2"]
    assert spec.build(raw).shape == (3, 8)
    assert DesignSpec.for_data("first_order", raw[:, :2]).build(raw[:, :2]).shape[1] == 3
    assert DesignSpec.for_data("marginal", raw[:, :2]).names() == ["(intercept)", "x1"]
    assert DesignSpec.for_data("interaction_only", raw[:, :2]).names() == ["(intercept)", "W", "x1", "W*x1"]
