import math

import numpy as np
import pytest
from oracles import random_instance
from scipy import stats
from scipy.optimize import minimize

from railchoice.estimator import (EstimationError, HessianError, OptimizerSettings, canonical_labels, default_start,
                                  inference, likelihood_ratio_test, max_pairwise_spread, maximize,
                                  numerical_hessian, random_starts, relative_error)
from railchoice.latent_choice import LikelihoodModel, ModelSpec

SPEC2 = ModelSpec(classes=("TS", "CA"), attributes=("ovt", "a2"), class_features=("f1",), base_class="CA",
                  shared=frozenset({"a2"}), label_order="ovt")


def poly(x):
    a, b, c = x
    return a ** 3 * b ** 2 - 2 * a * b * c + c ** 4 + 3 * b ** 5 - a ** 2 * c


def poly_hessian(x):
    a, b, c = x
    return np.array([
        [6 * a * b ** 2 - 2 * c, 6 * a ** 2 * b - 2 * c, -2 * b - 2 * a],
        [6 * a ** 2 * b - 2 * c, 2 * a ** 3 + 60 * b ** 3, -2 * a],
        [-2 * b - 2 * a, -2 * a, 12 * c ** 2],
    ])


def smooth(x):
    a, b = x
    return math.exp(a) * math.sin(b) + math.log(1 + a ** 2 * b ** 2)


def smooth_hessian(x):
    a, b = x
    u = 1 + a ** 2 * b ** 2
    faa = math.exp(a) * math.sin(b) + (2 * b ** 2 * u - 4 * a ** 2 * b ** 4) / u ** 2
    fbb = -math.exp(a) * math.sin(b) + (2 * a ** 2 * u - 4 * a ** 4 * b ** 2) / u ** 2
    fab = math.exp(a) * math.cos(b) + (4 * a * b * u - 4 * a ** 3 * b ** 3) / u ** 2
    return np.array([[faa, fab], [fab, fbb]])


def test_hessian_exact_on_low_degree_polynomials():
    x = np.array([0.7, -1.2, 0.4])
    np.testing.assert_allclose(numerical_hessian(poly, x, 1e-2), poly_hessian(x), atol=1e-6)


def test_hessian_error_is_fourth_order():
    x = np.array([0.3, 0.8])
    exact = smooth_hessian(x)
    # halving the step in the asymptotic range cuts every entry's error by about 16
    e1 = np.abs(numerical_hessian(smooth, x, 0.025) - exact)
    e2 = np.abs(numerical_hessian(smooth, x, 0.0125) - exact)
    assert np.all((e1 / e2 > 15) & (e1 / e2 < 17))


def test_hessian_shrinks_step_on_non_finite_values():
    def f(x):
        return -x[0] ** 2 if abs(x[0]) < 0.15 else math.nan
    np.testing.assert_allclose(numerical_hessian(f, np.zeros(1), 0.1), [[-2.0]], atol=1e-8)
    with pytest.raises(HessianError):
        numerical_hessian(lambda x: math.nan if x[0] != 0 else 0.0, np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        numerical_hessian(poly, np.zeros(3), -1.0)


def test_inference_identity_and_delta_method():
    spec = ModelSpec(classes=("A",), attributes=("z",), class_features=(), shared=frozenset(), label_order=None)
    x = np.array([0.5, math.log(2.0)])
    se, t, diag = inference(-np.diag([1.0, 4.0]), x, spec)
    np.testing.assert_allclose(se, [1.0, 1.0])
    np.testing.assert_allclose(t, [0.5, 2.0])
    assert diag["max_eigenvalue"] == pytest.approx(-1.0)


def test_inference_flags_non_concave_and_singular():
    se, t, diag = inference(np.diag([-1.0, 2.0]), np.array([1.0, 1.0]))
    assert np.isnan(se[1]) and np.isnan(t[1]) and diag["non_concave"] == [1]
    with pytest.warns(RuntimeWarning, match="pseudo-inverse"):
        se, _, diag = inference(np.array([[-1.0, -1.0], [-1.0, -1.0]]), np.ones(2))
    assert diag["pseudo_inverse"]


def test_likelihood_ratio_test():
    stat, p = likelihood_ratio_test(-1045.54, -1000.0, 5)
    assert stat == pytest.approx(91.08)
    assert p == pytest.approx(stats.chi2.sf(91.08, 5)) and p < 1e-15
    with pytest.warns(RuntimeWarning, match="restricted"):
        assert likelihood_ratio_test(-990.0, -1000.0, 1) == (0.0, 1.0)
    with pytest.raises(ValueError):
        likelihood_ratio_test(-1.0, -1.0, 0)


def test_relative_error_and_spread():
    assert relative_error(1.1, -1.0) == pytest.approx(2.1)
    assert relative_error(0.3, 0.0) == 0.3
    assert max_pairwise_spread([np.array([1.0, 2.0]), np.array([1.5, 1.0])]) == 1.0


def test_random_starts_are_reproducible():
    a = random_starts(5, 3, seed=9)
    np.testing.assert_array_equal(a, random_starts(5, 3, seed=9))
    assert a.min() >= -5 and a.max() <= 5


def test_default_start_breaks_class_symmetry():
    x = default_start(SPEC2)
    p = SPEC2.unpack(x)
    assert p.beta[0, 0] != p.beta[1, 0]
    assert np.all(p.theta == 0)


def test_canonical_labels_order_by_ovt():
    x = SPEC2.pack(SPEC2.unpack(np.array([0.4, -2.0, -0.5, 0.3, 0.1])))
    p = SPEC2.unpack(x)
    assert p.beta[0, 0] < p.beta[1, 0]
    y = canonical_labels(SPEC2, x)
    q = SPEC2.unpack(y)
    assert q.beta[0, 0] == p.beta[1, 0] and q.beta[1, 0] == p.beta[0, 0]
    np.testing.assert_allclose(q.theta[0], -p.theta[0])


def _small_problem(seed=0):
    rng = np.random.default_rng(seed)
    data, _ = random_instance(rng, 150, 1, 2, 3, 3)
    return data


def test_maximize_agrees_with_independent_optimiser():
    data = _small_problem()
    spec = ModelSpec(classes=("A",), attributes=("ovt", "a2"), class_features=(), shared=frozenset(),
                     label_order=None)
    data.X = data.X[:, :0]
    res = maximize(data, spec)
    model = LikelihoodModel(data, spec)
    ref = minimize(lambda x: -model.loglike(x), np.zeros(spec.n_free), method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 20_000})
    assert res.converged
    assert res.loglik == pytest.approx(-ref.fun, abs=1e-6)
    np.testing.assert_allclose(res.x, ref.x, atol=1e-3)
    assert res.loglik_null == pytest.approx(model.loglike(np.zeros(spec.n_free)))
    assert res.loglik >= res.loglik_null


def test_maximize_latent_class_is_stationary_and_canonical():
    data = _small_problem(1)
    res = maximize(data, SPEC2)
    assert res.converged and res.diagnostics["grad_inf_norm"] < 1e-6
    p = SPEC2.unpack(res.x)
    assert p.beta[0, 0] >= p.beta[1, 0]
    assert res.loglik >= res.diagnostics["loglik_init"]
    d = res.to_dict({"beta[TS:ovt]": -1.0})
    assert d["parameters"][1]["name"] == "beta[TS:ovt]" and "rel_error" in d["parameters"][1]


def test_maximize_reports_non_convergence_and_rejects_bad_starts():
    data = _small_problem(2)
    res = maximize(data, SPEC2, settings=OptimizerSettings(max_iter=1))
    assert not res.converged
    with pytest.raises(EstimationError):
        maximize(data, SPEC2, np.full(SPEC2.n_free, np.nan))
    with pytest.raises(EstimationError):
        maximize(data, SPEC2, np.zeros(2))


def test_optimizer_settings_from_dict():
    s = OptimizerSettings.from_dict({"gtol": 1e-5, "max_iter": 10, "other": 1})
    assert s == OptimizerSettings(1e-5, 10)
