import math

import numpy as np
import pytest
from oracles import brute_force_passenger, random_instance
from scipy import stats
from scipy.optimize import approx_fprime

from railchoice.latent_choice import (AfcTrip, ChoiceData, IntegrationGrid, LikelihoodModel, ModelError, ModelSpec,
                                      PassengerProfile, ParamVector, class_probability, choice_probability,
                                      log_likelihood, passenger_likelihood, read_afc, read_profiles, write_afc,
                                      write_profiles)
from railchoice.simulator import synthetic_spec

SPEC = ModelSpec(classes=("A", "B", "C"), attributes=("a1", "a2", "a3"), class_features=("f1", "f2"),
                 base_class="C", shared=frozenset({"a1"}), sigma_shared=False, panel="designated", label_order=None)


def test_class_probabilities():
    theta = np.array([[1.0, -0.5], [0.0, 0.0]])
    p = class_probability([2.0, 1.0], theta)
    e = np.exp([1.5, 0.0])
    np.testing.assert_allclose(p, e / e.sum())
    with pytest.raises(ModelError):
        class_probability([1.0], theta)


def test_choice_probabilities_with_attachment():
    z = np.array([[1.0, 2.0], [0.5, 0.0], [0.0, 1.0]])
    beta = np.array([-0.3, 0.7])
    p = choice_probability(z, beta, alpha=0.8, attach=[0, 1, 1])
    v = z @ beta + 0.8 * np.array([0, 1, 1])
    np.testing.assert_allclose(p, np.exp(v) / np.exp(v).sum())
    # an alpha added to every alternative cancels
    np.testing.assert_allclose(choice_probability(z, beta, 2.0), choice_probability(z, beta))
    with np.errstate(invalid="ignore"), pytest.raises(ModelError):
        choice_probability(z, [np.inf, 0.0])


def test_grid_midpoints_and_weights():
    g = IntegrationGrid()
    np.testing.assert_allclose(g.midpoints, [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])
    w = np.exp(g.log_weights(0.7))
    np.testing.assert_allclose(w, stats.norm.pdf(g.midpoints, scale=0.7))
    fine = IntegrationGrid(-3.0, 3.0, 0.01)
    mass = np.exp(fine.log_weights(1.0)).sum()
    assert mass == pytest.approx(stats.norm.cdf(3) - stats.norm.cdf(-3), abs=1e-5)
    with pytest.raises(ModelError):
        IntegrationGrid(-3.0, 3.0, 0.7)
    with pytest.raises(ModelError):
        IntegrationGrid(1.0, -1.0, 0.5)


def test_spec_layout_and_round_trips():
    spec = synthetic_spec()
    assert spec.names == ("theta[TS:x1]", "theta[TS:x2]", "beta[ivt]", "beta[TS:ovt]", "beta[CA:ovt]",
                          "beta[TS:transfers]", "beta[CA:transfers]", "beta[TS:dwt]", "beta[CA:dwt]",
                          "beta[log_ps]", "log_sigma")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    rng = np.random.default_rng(0)
    x = rng.normal(size=SPEC.n_free)
    p = SPEC.unpack(x)
    assert np.all(p.theta[SPEC.base_index] == 0)
    assert np.all(p.beta[:, 0] == p.beta[0, 0])
    np.testing.assert_allclose(SPEC.pack(p), x)
    b = spec.baseline()
    assert b.n_classes == 1 and b.n_free == 6 and b.names[-1] == "log_sigma"


def test_spec_validation():
    with pytest.raises(ModelError):
        ModelSpec(classes=("A", "B"), base_class="Z")
    with pytest.raises(ModelError):
        ModelSpec(shared=frozenset({"nope"}))
    with pytest.raises(ModelError):
        ModelSpec(panel="some")
    with pytest.raises(ModelError):
        SPEC.unpack(np.zeros(3))
    p = SPEC.unpack(np.zeros(SPEC.n_free))
    bad = ParamVector(p.theta, p.beta + np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]]), p.sigma)
    with pytest.raises(ModelError):
        SPEC.pack(bad)


def test_from_named_uses_natural_sigma():
    spec = synthetic_spec()
    vals = {n: 0.1 * i for i, n in enumerate(spec.names) if n != "log_sigma"}
    vals["sigma"] = 2.0
    x = spec.from_named(vals)
    assert x[-1] == pytest.approx(math.log(2.0))


@pytest.mark.parametrize("seed", range(4))
def test_vectorised_likelihood_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    data, per_pax = random_instance(rng, 6, 2, 3, 3, 4, budget=81)
    model = LikelihoodModel(data, SPEC)
    x = rng.uniform(-1.5, 1.5, SPEC.n_free)
    params = SPEC.unpack(x)
    got = model.per_passenger(x)
    for i, (xi, d, z, att) in enumerate(per_pax):
        ref = brute_force_passenger(xi, d, z, att, params, SPEC.grid)
        scalar = passenger_likelihood(xi, d, z, params, SPEC.grid, att)
        assert math.exp(got[i]) == pytest.approx(ref, rel=1e-10)
        assert scalar == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("spec", [SPEC, synthetic_spec(classes=("TS", "CA"), attributes=("a1", "a2", "a3"),
                                                       class_features=("f1", "f2"), shared=frozenset({"a1"}),
                                                       label_order=None),
                                  SPEC.baseline()])
def test_analytic_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(5)
    data, _ = random_instance(rng, 25, len(spec.class_features), 3, 3, 3)
    if spec.n_classes == 1:
        data = ChoiceData(data.passenger_ids, data.starts, data.X[:, :0], data.Z, data.avail, data.log_dens,
                          data.attach)
    model = LikelihoodModel(data, spec)
    for _ in range(3):
        x = rng.uniform(-1, 1, spec.n_free)
        _, g = model.loglike_and_grad(x)
        fd = approx_fprime(x, model.loglike, 1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4)


def test_relabelled_parameters_give_same_likelihood():
    rng = np.random.default_rng(2)
    data, _ = random_instance(rng, 20, 2, 3, 3, 3)
    model = LikelihoodModel(data, SPEC)
    x = rng.normal(size=SPEC.n_free)
    for order in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
        assert model.loglike(SPEC.relabel(x, order)) == pytest.approx(model.loglike(x), rel=1e-12)


def test_all_zero_passenger_is_floored_and_reported():
    rng = np.random.default_rng(3)
    data, _ = random_instance(rng, 4, 2, 3, 2, 2)
    data.log_dens[data.starts[1]] = -np.inf
    model = LikelihoodModel(data, SPEC)
    v, g = model.loglike_and_grad(np.zeros(SPEC.n_free))
    assert np.isfinite(v) and np.all(np.isfinite(g))
    assert model.n_floored == SPEC.n_classes * len(SPEC.grid.midpoints)


def test_panel_all_cancels_inside_choice_sets():
    rng = np.random.default_rng(4)
    data, _ = random_instance(rng, 10, 2, 3, 3, 1)
    spec = ModelSpec(classes=("A", "B", "C"), attributes=("a1", "a2", "a3"), class_features=("f1", "f2"),
                     shared=frozenset(), panel="all", label_order=None)
    data.attach[:] = data.avail
    x = rng.normal(size=spec.n_free)
    x2 = x.copy()
    x2[spec.log_sigma_mask()] += 1.0
    # with one trip per passenger and the term on every path, sigma has no effect beyond grid mass
    mass = [np.exp(spec.grid.log_weights(s)).sum() for s in (np.exp(x[-1]), np.exp(x2[-1]))]
    diff = log_likelihood(data, spec, x2) - log_likelihood(data, spec, x)
    assert diff == pytest.approx(data.n_passengers * (math.log(mass[1]) - math.log(mass[0])), rel=1e-9)


def test_build_from_trips_orders_by_passenger(small_sim):
    spec = synthetic_spec()
    trips = list(reversed(small_sim.trips[:30]))
    dens = np.full((30, 2), 0.01)
    profiles = {p.passenger_id: p for p in small_sim.profiles}
    data = ChoiceData.build(trips, profiles, small_sim.choice_sets, dens, spec)
    assert data.passenger_ids == sorted(data.passenger_ids)
    assert data.n_trips == 30 and data.n_passengers == 10
    assert data.attach.sum() == 30  # one designated path per trip
    override = ChoiceData.build(trips, profiles, small_sim.choice_sets, dens, spec, lambda t, p: {"ovt": 99.0})
    assert np.all(override.Z[:, :, 1] == 99.0)
    sub = data.subset([2, 0])
    assert sub.passenger_ids == [data.passenger_ids[2], data.passenger_ids[0]]
    assert data.replicate(2).n_passengers == 20


def test_build_requires_attributes(small_sim):
    spec = ModelSpec(attributes=("ivt", "missing"), label_order=None, shared=frozenset())
    profiles = {p.passenger_id: p for p in small_sim.profiles}
    with pytest.raises(ModelError):
        ChoiceData.build(small_sim.trips[:3], profiles, small_sim.choice_sets, np.ones((3, 2)), spec)


def test_afc_and_profile_files(tmp_path):
    trips = [AfcTrip("p1", 0, "A", "E", 100, 900), AfcTrip("p1", 1, "B", "F", 2000, 2600)]
    write_afc(trips, tmp_path / "afc.csv")
    assert read_afc(tmp_path / "afc.csv") == trips
    profiles = [PassengerProfile("p1", {"x1": 0.25, "x2": -1.0})]
    write_profiles(profiles, ["x1", "x2"], tmp_path / "prof.csv")
    assert read_profiles(tmp_path / "prof.csv") == {"p1": profiles[0]}
    (tmp_path / "bad.csv").write_text("passenger,trip\n")
    with pytest.raises(ModelError):
        read_afc(tmp_path / "bad.csv")
