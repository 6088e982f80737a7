import filecmp
from collections import Counter

import numpy as np
import pytest

from railchoice.latent_choice import class_probability, read_afc
from railchoice.ptam import feasible_itineraries
from railchoice.simulator import (CROWDED, LINES, TRUE_PARAMS, SimulationConfig, SimulationError, simulate,
                                  synthetic_spec, tap_out_time)


@pytest.fixture(scope="module")
def sim():
    return simulate(SimulationConfig(seed=0))


@pytest.fixture(scope="module")
def big_sim():
    return simulate(SimulationConfig(n_passengers=4000, calibration_journeys=0, seed=5))


def test_network_layout(sim):
    assert sorted(sim.network.stations) == list("ABCDEFG")
    assert len(sim.choice_sets) == 9
    assert all(len(cs.paths) == 2 for cs in sim.choice_sets.values())
    a_e = sim.choice_sets[("A", "E")].paths
    assert [p.stations() for p in a_e] == [["A", "B", "E"], ["A", "E"]]
    assert a_e[0].link_set() == {("A", "B"), ("B", "E")}
    assert a_e[1].link_set() == {("A", "B"), ("B", "C"), ("C", "E")}
    assert sum(p.panel for p in a_e) == 1


def test_timetable_headways_and_jitter(sim):
    for (lid, direction), svc in sim.timetable.services.items():
        first_dep = svc.departures[:100, 0]
        assert 118 <= np.mean(np.diff(first_dep)) <= 122
        run_times = LINES[lid][1]
        base = np.array(run_times if direction == "up" else run_times[::-1], dtype=float)
        run = svc.arrivals[:, 1:] - svc.departures[:, :-1]
        assert np.all(np.abs(run - base) <= 20)
        # arrivals and departures move forward along the line and never overtake
        assert np.all(np.diff(svc.arrivals, axis=1) > 0)
        assert np.all(np.diff(svc.arrivals, axis=0) > 0)
        assert np.all(np.diff(svc.departures, axis=0) > 0)
        assert np.all(svc.departures[:, 1:-1] - svc.arrivals[:, 1:-1] == 30)


def test_dataset_size(sim):
    assert len(sim.trips) == 8100 and len(sim.profiles) == 2700
    assert Counter(t.passenger_id for t in sim.trips).most_common(1)[0][1] == 3
    lo, hi = sim.config.tapin_window
    assert all(lo <= t.t_in < hi and t.t_out > t.t_in for t in sim.trips)


def test_left_behind_frequencies_match_profile(big_sim):
    counts = Counter()
    for trip, truth in zip(big_sim.trips, big_sim.truth):
        path = big_sim.choice_sets[(trip.origin, trip.destination)].paths[
            big_sim.choice_sets[(trip.origin, trip.destination)].index(truth.path_id)]
        for seg, k in zip(path.segments, truth.left_behind):
            if (seg.board, seg.line, seg.direction) == ("C", "red", "up"):
                counts[k] += 1
            else:
                assert k == 0
    n = sum(counts.values())
    assert n >= 2000
    freq = np.array([counts[k] for k in range(3)]) / n
    np.testing.assert_allclose(freq, CROWDED[("C", "red", "up")], atol=0.03)


def test_class_shares_match_membership_model(big_sim):
    spec = synthetic_spec()
    theta = spec.unpack(spec.from_named(TRUE_PARAMS)).theta
    expected = np.mean([class_probability([p.features[f] for f in spec.membership_features], theta)
                        for p in big_sim.profiles], axis=0)
    per_pax = {t.passenger_id: t.latent_class for t in big_sim.truth}
    share = np.array([sum(c == k for c in per_pax.values()) for k in spec.classes]) / len(per_pax)
    np.testing.assert_allclose(share, expected, atol=0.02)
    # the panel term is constant within a passenger
    alphas = {}
    for t in big_sim.truth:
        assert alphas.setdefault(t.passenger_id, t.alpha) == t.alpha


def test_trips_replay_from_recorded_walks(sim):
    for trip, truth in zip(sim.trips[:1500], sim.truth[:1500]):
        cs = sim.choice_sets[(trip.origin, trip.destination)]
        path = cs.paths[cs.index(truth.path_id)]
        t = trip.t_in + truth.walks_s[0]
        arrival = None
        for j, seg in enumerate(path.segments):
            if j:
                t = arrival + truth.walks_s[j]
            dep, arr = sim.timetable.segment_times(seg)
            first = int(np.searchsorted(dep, t))
            assert truth.itinerary[j] - first == truth.left_behind[j]
            arrival = float(arr[truth.itinerary[j]])
        assert tap_out_time(arrival, truth.walks_s[-1]) == trip.t_out
        assert truth.itinerary in feasible_itineraries(trip.t_in, trip.t_out, path, sim.timetable)


def test_output_is_deterministic(tmp_path):
    cfg = dict(n_passengers=40, calibration_journeys=50, seed=7)
    a = simulate(SimulationConfig(**cfg)).write(tmp_path / "a")
    b = simulate(SimulationConfig(**cfg)).write(tmp_path / "b")
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    c = simulate(SimulationConfig(**{**cfg, "seed": 8})).write(tmp_path / "c")
    assert not filecmp.cmp(a["afc"], c["afc"], shallow=False)
    assert len(read_afc(a["afc"])) == 120


def test_calibration_trips_are_single_line(small_sim):
    assert len(small_sim.calibration_trips) == 2000
    assert {(t.origin, t.destination) for t in small_sim.calibration_trips} == {("C", "F")}
    assert 0 < len(small_sim.journeys) < 2000


def test_config_validation():
    with pytest.raises(SimulationError):
        SimulationConfig(n_passengers=0).validate()
    with pytest.raises(SimulationError):
        SimulationConfig(crowding={("C", "red", "up"): (0.5, 0.4)}).validate()
    with pytest.raises(SimulationError):
        SimulationConfig(headway_jitter_s=200.0).validate()
    with pytest.raises(SimulationError):
        SimulationConfig(tapin_window=(0, 10)).validate()
    with pytest.raises(SimulationError):
        SimulationConfig.from_dict({"n_pasengers": 3})
    cfg = SimulationConfig.from_dict({"crowding": {"C:red:up": [1.0]}, "calibration_ods": [["D", "C"]]})
    assert cfg.crowding == {("C", "red", "up"): (1.0,)} and cfg.calibration_ods == (("D", "C"),)
    with pytest.raises(SimulationError):
        simulate(SimulationConfig(n_passengers=2, calibration_ods=(("A", "G"),), calibration_journeys=5))
