"""Synthetic AFC/AVL data with known path-choice parameters.

The network has seven stations A-G and three lines:

    green  A - B - C - E
    red    D - C - F - G
    blue   D - B - E - F

Origins A, B, D and destinations E, F, G give nine OD pairs with two paths
each. The red-line platform at C (up direction, towards G) is the only
crowded platform.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from .latent_choice import (AfcTrip, ModelSpec, PassengerProfile, choice_probability, class_probability,
                            write_afc, write_profiles)
from .leftbehind_gmm import reference_journeys, single_line_segment, write_journeys
from .ptam import LeftBehindProfile, scheduled_out_of_vehicle_time
from .transit_core import (UP, ChoiceSet, Line, Link, Network, NetworkError, Service, Station, Timetable,
                           choice_sets_to_dict, save_json, with_path_sizes)
from .walktime import WalkModel

HOUR = 3600

# line -> (stations in up order, per-link run times in seconds, per-link speeds in m/s)
LINES = {
    "green": (("A", "B", "C", "E"), (240, 60, 420), (10.0, 7.0, 14.0)),
    "red": (("D", "C", "F", "G"), (240, 60, 300), (7.0, 7.0, 10.0)),
    "blue": (("D", "B", "E", "F"), (300, 60, 360), (14.0, 7.0, 14.0)),
}

# OD -> two paths as (line, board, alight) legs
PATHS = {
    ("A", "E"): ([("green", "A", "B"), ("blue", "B", "E")], [("green", "A", "E")]),
    ("A", "F"): ([("green", "A", "C"), ("red", "C", "F")], [("green", "A", "B"), ("blue", "B", "F")]),
    ("A", "G"): ([("green", "A", "C"), ("red", "C", "G")],
                 [("green", "A", "B"), ("blue", "B", "F"), ("red", "F", "G")]),
    ("B", "E"): ([("blue", "B", "E")], [("green", "B", "E")]),
    ("B", "F"): ([("green", "B", "C"), ("red", "C", "F")], [("blue", "B", "F")]),
    ("B", "G"): ([("green", "B", "C"), ("red", "C", "G")], [("blue", "B", "F"), ("red", "F", "G")]),
    ("D", "E"): ([("blue", "D", "E")], [("red", "D", "C"), ("green", "C", "E")]),
    ("D", "F"): ([("red", "D", "F")], [("blue", "D", "F")]),
    ("D", "G"): ([("red", "D", "G")], [("blue", "D", "F"), ("red", "F", "G")]),
}

TRUE_PARAMS = {
    "beta[ivt]": -0.2676,
    "beta[TS:ovt]": -0.2980,
    "beta[CA:ovt]": -0.6386,
    "beta[TS:transfers]": -1.3068,
    "beta[CA:transfers]": -3.1737,
    "beta[TS:dwt]": -0.3222,
    "beta[CA:dwt]": -0.7825,
    "beta[log_ps]": 0.5815,
    "sigma": 1.0,
    "theta[TS:x1]": 1.5,
    "theta[TS:x2]": 0.6,
}

CROWDED = {("C", "red", UP): (0.2, 0.5, 0.3)}
LESS_CROWDED = (0.8, 0.2, 0.0)
MORE_CROWDED = (0.1, 0.2, 0.7)


class SimulationError(ValueError):
    """Invalid simulation configuration."""


@dataclass
class SimulationConfig:
    n_passengers: int = 2700
    trips_per_passenger: int = 3
    tapin_window: tuple[int, int] = (7 * HOUR, 10 * HOUR)
    service_window: tuple[int, int] = (6 * HOUR + 1800, 11 * HOUR + 1800)
    headway_s: float = 120.0
    headway_jitter_s: float = 10.0
    runtime_jitter_s: float = 20.0
    dwell_s: float = 30.0
    speed_mean: float = 1.2
    speed_sd: float = 0.5
    walk_distance_m: tuple[float, float] = (30.0, 50.0)
    crowding: Mapping[tuple[str, str, str], Sequence[float]] = field(default_factory=lambda: dict(CROWDED))
    truth: Mapping[str, float] = field(default_factory=lambda: dict(TRUE_PARAMS))
    feature_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"x1": (-4.0, 4.0), "x2": (-2.0, 2.0)})
    calibration_journeys: int = 10000
    calibration_ods: tuple[tuple[str, str], ...] = (("C", "F"),)
    profile_period_s: int = 900
    ovt_mode: str = "timetable"
    seed: int = 0

    def validate(self):
        if self.n_passengers <= 0 or self.trips_per_passenger <= 0:
            raise SimulationError("passenger and trip counts must be positive")
        if self.ovt_mode not in ("timetable", "static"):
            raise SimulationError("ovt_mode must be 'timetable' or 'static'")
        if self.calibration_journeys < 0:
            raise SimulationError("calibration journey count must be non-negative")
        lo, hi = self.tapin_window
        s0, s1 = self.service_window
        if not (s0 <= lo < hi <= s1):
            raise SimulationError("tap-in window must lie inside the service window")
        if self.headway_jitter_s >= self.headway_s:
            raise SimulationError("headway jitter must be smaller than the headway")
        for key, vec in self.crowding.items():
            v = np.asarray(vec, dtype=float)
            if np.any(v < 0) or abs(v.sum() - 1) > 1e-9:
                raise SimulationError(f"left-behind vector for {key} must sum to 1")
        for v in (self.headway_jitter_s, self.runtime_jitter_s, self.dwell_s):
            if not math.isfinite(v) or v < 0:
                raise SimulationError("jitter and dwell settings must be finite and non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationConfig":
        kw = dict(d)
        if "crowding" in kw:
            kw["crowding"] = {tuple(k.split(":")): tuple(v) for k, v in kw["crowding"].items()}
        for key in ("tapin_window", "service_window", "walk_distance_m"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "feature_ranges" in kw:
            kw["feature_ranges"] = {k: tuple(v) for k, v in kw["feature_ranges"].items()}
        if "calibration_ods" in kw:
            kw["calibration_ods"] = tuple(tuple(od) for od in kw["calibration_ods"])
        unknown = set(kw) - {f.name for f in fields(cls)}
        if unknown:
            raise SimulationError(f"unknown simulation settings: {', '.join(sorted(unknown))}")
        return cls(**kw)


def synthetic_spec(**overrides) -> ModelSpec:
    """The two-class model used to generate and re-estimate the synthetic data."""
    kw = dict(classes=("TS", "CA"), attributes=("ivt", "ovt", "transfers", "dwt", "log_ps"),
              class_features=("x1", "x2"), base_class="CA", shared=frozenset({"ivt", "log_ps"}),
              sigma_shared=True, panel="designated", label_order="ovt")
    kw.update(overrides)
    return ModelSpec(**kw)


def build_synthetic_network(dwell_s: float = 30.0) -> tuple[Network, dict[tuple[str, str], ChoiceSet]]:
    """Topology and the two-path choice sets of the nine synthetic OD pairs.

    The second path of every OD pair carries the panel term.
    """
    stations = {s: Station(s, f"Station {s}") for s in "ABCDEFG"}
    lines = {}
    for lid, (seq, times, speeds) in LINES.items():
        links = tuple(Link(a, b, t * v, float(t)) for a, b, t, v in zip(seq, seq[1:], times, speeds))
        lines[lid] = Line(lid, seq, links)
    net = Network(stations, lines, dwell_s)
    choice_sets = {}
    for (o, d), legs in PATHS.items():
        paths = []
        for m, leg in enumerate(legs):
            ids = [leg[0][1]] + [l[2] for l in leg]
            full = [ids[0]]
            for seg in leg:
                stops = lines[seg[0]].stations
                i, j = stops.index(seg[1]), stops.index(seg[2])
                step = 1 if j > i else -1
                full.extend(stops[i + step: j + step: step])
            paths.append(net.make_path("-".join(full), leg, panel=(m == 1)))
        choice_sets[(o, d)] = ChoiceSet(o, d, tuple(paths))
    return net, choice_sets


def sample_walk_model(rng: np.random.Generator, network: Network, config: SimulationConfig) -> WalkModel:
    lo, hi = config.walk_distance_m
    gate = {s: round(float(rng.uniform(lo, hi)), 2) for s in sorted(network.stations)}
    transfer = {}
    for s in sorted(network.stations):
        serving = sorted(l.id for l in network.lines.values() if s in l.stations)
        for a in serving:
            for b in serving:
                if a != b:
                    transfer[f"{s}:{a}:{b}"] = round(float(rng.uniform(lo, hi)), 2)
    return WalkModel(config.speed_mean, config.speed_sd, gate, transfer, 0.5 * (lo + hi))


def path_attributes(choice_sets: Mapping[tuple[str, str], ChoiceSet], network: Network, walk: WalkModel,
                    headway_s: float, crowding: Mapping[tuple[str, str, str], Sequence[float]]
                    ) -> dict[tuple[str, str], ChoiceSet]:
    """Attach in-vehicle, out-of-vehicle, transfer, denied-waiting and log path-size attributes (minutes).

    Out-of-vehicle time is the expected access, egress and transfer walks plus
    half a headway of waiting per boarding. Denied waiting is the expected
    left-behind count times the headway at crowded boarding platforms.
    """
    out = {}
    for od, cs in choice_sets.items():
        paths = []
        for p in cs.paths:
            segs = p.segments
            ivt = sum(network.ride_time_s(s) for s in segs)
            ovt = walk.access(segs[0].board).mean + walk.egress(segs[-1].alight).mean
            for a, b in zip(segs, segs[1:]):
                ovt += walk.transfer(b.board, a.line, b.line).mean
            ovt += 0.5 * headway_s * len(segs)
            dwt = 0.0
            for s in segs:
                vec = crowding.get((s.board, s.line, s.direction))
                if vec is not None:
                    dwt += float(np.dot(np.arange(len(vec)), vec)) * headway_s
            attrs = {"ivt": ivt / 60.0, "ovt": ovt / 60.0, "transfers": float(len(segs) - 1), "dwt": dwt / 60.0}
            paths.append(type(p)(p.id, p.segments, p.links, attrs, panel=p.panel))
        out[od] = with_path_sizes(ChoiceSet(cs.origin, cs.destination, tuple(paths)))
    return out


def trip_attributes(timetable: Timetable, walk: WalkModel, mode: str = "timetable"):
    """Per-trip attribute overrides: out-of-vehicle time from the timetable at tap-in.

    Returns ``None`` for ``mode="static"``, in which case the path-level
    expected values are used for every trip.
    """
    if mode == "static":
        return None
    if mode != "timetable":
        raise SimulationError(f"unknown out-of-vehicle time mode {mode!r}")

    def attrs(trip, path) -> dict[str, float]:
        return {"ovt": scheduled_out_of_vehicle_time(trip.t_in, path, timetable, walk)}

    return attrs


def generate_timetable(network: Network, config: SimulationConfig, rng: np.random.Generator) -> Timetable:
    """Dispatch every service with jittered headways and link run times.

    A run whose jitter would overtake the previous run is redrawn.
    """
    start, end = config.service_window
    services = {}
    for lid in sorted(network.lines):
        line = network.lines[lid]
        for direction in ("up", "down"):
            stops = line.ordered(direction)
            links = list(line.links) if direction == "up" else list(line.links)[::-1]
            base = np.array([l.run_time_s for l in links])
            arrs, deps = [], []
            t0 = start + float(rng.uniform(0, config.headway_s))
            while t0 < end:
                for _ in range(1000):
                    run = base + rng.uniform(-config.runtime_jitter_s, config.runtime_jitter_s, len(base))
                    arr = np.empty(len(stops))
                    dep = np.empty(len(stops))
                    arr[0] = dep[0] = round(t0)
                    for s in range(1, len(stops)):
                        arr[s] = round(dep[s - 1] + run[s - 1])
                        dep[s] = arr[s] + (config.dwell_s if s < len(stops) - 1 else 0.0)
                    if not deps or (np.all(dep > deps[-1]) and np.all(arr > arrs[-1])):
                        break
                else:
                    raise SimulationError("could not draw a non-overtaking run")
                arrs.append(arr)
                deps.append(dep)
                t0 += config.headway_s + float(rng.uniform(-config.headway_jitter_s, config.headway_jitter_s))
            services[(lid, direction)] = Service(lid, direction, stops,
                                                 np.array(arrs, dtype=np.int64), np.array(deps, dtype=np.int64))
    return Timetable(services)


@dataclass(frozen=True)
class TripTruth:
    passenger_id: str
    trip_idx: int
    latent_class: str
    alpha: float
    path_id: str
    itinerary: tuple[int, ...]
    left_behind: tuple[int, ...]
    walks_s: tuple[float, ...] = ()


@dataclass
class SimulationResult:
    config: SimulationConfig
    network: Network
    walk: WalkModel
    choice_sets: dict[tuple[str, str], ChoiceSet]
    timetable: Timetable
    leftbehind: LeftBehindProfile
    trips: list[AfcTrip]
    profiles: list[PassengerProfile]
    truth: list[TripTruth]
    calibration_trips: list[AfcTrip]
    journeys: list[tuple[str, str, int, float]]
    spec: ModelSpec

    def manifest(self) -> dict:
        """Settings downstream stages need to interpret the files."""
        c = self.config
        return {"seed": c.seed, "ovt_mode": c.ovt_mode, "headway_s": c.headway_s,
                "profile_period_s": c.profile_period_s, "n_passengers": c.n_passengers,
                "trips_per_passenger": c.trips_per_passenger, "n_trips": len(self.trips),
                "n_calibration_trips": len(self.calibration_trips)}

    def write(self, out_dir: str | FsPath) -> dict[str, FsPath]:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "manifest": out / "dataset.json",
            "network": out / "network.json",
            "walk": out / "walk.json",
            "paths": out / "paths.json",
            "timetable": out / "timetable.csv",
            "afc": out / "afc.csv",
            "profiles": out / "profiles.csv",
            "leftbehind": out / "leftbehind_true.csv",
            "calibration_afc": out / "calibration_afc.csv",
            "journeys": out / "journeys.csv",
            "truth": out / "ground_truth.json",
            "truth_trips": out / "ground_truth_trips.csv",
        }
        save_json(self.manifest(), files["manifest"])
        save_json(self.network.to_dict(), files["network"])
        save_json(self.walk.to_dict(), files["walk"])
        save_json(choice_sets_to_dict(self.choice_sets), files["paths"])
        self.timetable.to_csv(files["timetable"])
        write_afc(self.trips, files["afc"])
        write_profiles(self.profiles, list(self.spec.class_features), files["profiles"])
        self.leftbehind.to_csv(files["leftbehind"])
        write_afc(self.calibration_trips, files["calibration_afc"])
        write_journeys(self.journeys, files["journeys"])
        save_json({"params": dict(self.config.truth), "spec": self.spec.to_dict(), "seed": self.config.seed},
                  files["truth"])
        with open(files["truth_trips"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["passenger_id", "trip_idx", "class", "alpha", "path_id", "itinerary", "left_behind",
                        "walks_s"])
            for t in self.truth:
                w.writerow([t.passenger_id, t.trip_idx, t.latent_class, repr(t.alpha), t.path_id,
                            " ".join(map(str, t.itinerary)), " ".join(map(str, t.left_behind)),
                            " ".join(map(repr, t.walks_s))])
        return files


def ride_path(path, t_in: float, timetable: Timetable, walk: WalkModel, lb: LeftBehindProfile,
          rng: np.random.Generator) -> tuple[int, tuple[int, ...], tuple[int, ...], tuple[float, ...]]:
    """Walk, wait, get left behind and ride along ``path``.

    Returns the tap-out time, the boarded runs, the left-behind counts and the
    walk times (access, transfers, egress).
    """
    segs = path.segments
    walks = [float(walk.access(segs[0].board).sample(rng))]
    t = t_in + walks[0]
    runs, lbs = [], []
    arrival = 0.0
    for j, seg in enumerate(segs):
        if j > 0:
            walks.append(float(walk.transfer(seg.board, segs[j - 1].line, seg.line).sample(rng)))
            t = arrival + walks[-1]
        dep, arr = timetable.segment_times(seg)
        first = int(np.searchsorted(dep, t, side="left"))
        if first >= len(dep):
            raise SimulationError("timetable ends before the simulated trip; widen the service window")
        eta = lb.vector(seg.board, seg.line, seg.direction, float(dep[first]))
        k = int(rng.choice(len(eta), p=eta)) if len(eta) > 1 else 0
        run = first + k
        if run >= len(dep):
            raise SimulationError("timetable ends before the simulated trip; widen the service window")
        runs.append(run)
        lbs.append(k)
        arrival = float(arr[run])
    walks.append(float(walk.egress(segs[-1].alight).sample(rng)))
    return tap_out_time(arrival, walks[-1]), tuple(runs), tuple(lbs), tuple(walks)


def tap_out_time(arrival: float, egress_s: float) -> int:
    """Whole-second tap-out after the egress walk, at least one second after arrival."""
    return max(int(round(arrival + egress_s)), int(arrival) + 1)


def simulate(config: SimulationConfig | None = None) -> SimulationResult:
    """Generate network geometry, timetable, passengers, trips and calibration journeys.

    Every random draw flows from ``config.seed``; each passenger has its own
    child stream, so results do not depend on generation order.
    """
    config = config or SimulationConfig()
    config.validate()
    spec = synthetic_spec()
    x_true = spec.from_named(config.truth)
    params = spec.unpack(x_true)

    ss = np.random.SeedSequence(config.seed)
    geo_ss, tt_ss, pax_ss, cal_ss = ss.spawn(4)
    network, bare_sets = build_synthetic_network(config.dwell_s)
    walk = sample_walk_model(np.random.default_rng(geo_ss), network, config)
    choice_sets = path_attributes(bare_sets, network, walk, config.headway_s, config.crowding)
    timetable = generate_timetable(network, config, np.random.default_rng(tt_ss))
    s0, s1 = config.service_window
    lb = LeftBehindProfile.constant(config.crowding, s0, s1, config.profile_period_s)

    overrides = trip_attributes(timetable, walk, config.ovt_mode)
    ods = sorted(choice_sets)
    feats = spec.class_features
    width = len(str(config.n_passengers))
    trips: list[AfcTrip] = []
    profiles: list[PassengerProfile] = []
    truth: list[TripTruth] = []
    for i, child in enumerate(pax_ss.spawn(config.n_passengers)):
        rng = np.random.default_rng(child)
        pid = f"P{i:0{width}d}"
        x = {f: float(rng.uniform(*config.feature_ranges[f])) for f in feats}
        profiles.append(PassengerProfile(pid, x))
        cp = class_probability([x[f] for f in spec.membership_features], params.theta)
        k = int(rng.choice(len(cp), p=cp))
        alpha = float(rng.normal(0.0, params.sigma[k]))
        for n in range(config.trips_per_passenger):
            t_in = int(rng.integers(config.tapin_window[0], config.tapin_window[1]))
            od = ods[int(rng.integers(len(ods)))]
            cs = choice_sets[od]
            trip = AfcTrip(pid, n, od[0], od[1], t_in, t_in + 1)
            rows = []
            for p in cs.paths:
                attrs = p.attributes if overrides is None else {**p.attributes, **overrides(trip, p)}
                rows.append([attrs[a] for a in spec.attributes])
            z = np.array(rows)
            attach = np.array([1.0 if p.panel else 0.0 for p in cs.paths])
            pi = choice_probability(z, params.beta[k], alpha, attach if spec.panel == "designated" else None)
            m = int(rng.choice(len(pi), p=pi))
            t_out, runs, lbs, walks = ride_path(cs.paths[m], t_in, timetable, walk, lb, rng)
            trips.append(AfcTrip(pid, n, od[0], od[1], t_in, t_out))
            truth.append(TripTruth(pid, n, spec.classes[k], alpha, cs.paths[m].id, runs, lbs, walks))

    cal = simulate_calibration_trips(network, timetable, walk, lb, config, np.random.default_rng(cal_ss))
    journeys = reference_journeys(cal, network, timetable, walk, config.profile_period_s)
    return SimulationResult(config, network, walk, choice_sets, timetable, lb, trips, profiles, truth,
                            cal, journeys, spec)


def simulate_calibration_trips(network: Network, timetable: Timetable, walk: WalkModel,
                               lb: LeftBehindProfile, config: SimulationConfig,
                               rng: np.random.Generator) -> list[AfcTrip]:
    """Tap records of single-line trips on the calibration ODs, cycling through them in order."""
    ods = config.calibration_ods
    if not ods or config.calibration_journeys == 0:
        return []
    legs = []
    for o, d in ods:
        try:
            seg = single_line_segment(network, o, d)
        except NetworkError as exc:
            raise SimulationError(f"calibration OD {o}-{d} is not served by a single line") from exc
        legs.append(network.make_path(f"{o}-{d}", [(seg.line, o, d)]))
    trips = []
    for i in range(config.calibration_journeys):
        path = legs[i % len(legs)]
        t_in = int(rng.integers(config.tapin_window[0], config.tapin_window[1]))
        t_out = ride_path(path, t_in, timetable, walk, lb, rng)[0]
        trips.append(AfcTrip(f"J{i}", 0, path.origin, path.destination, t_in, t_out))
    return trips
