"""Rail network, path sets and AVL timetable.

Times are integer seconds since service-day midnight. Path attributes are in
minutes. Links are physical station pairs, so two lines running between the
same pair of stations share a link for path-size purposes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np

UP = "up"
DOWN = "down"
DIRECTIONS = (UP, DOWN)

TIMETABLE_COLUMNS = ("line_id", "direction", "run_id", "station_id", "arrival_s", "departure_s")


class NetworkError(ValueError):
    """Inconsistent network, path or timetable input."""


def link_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Station:
    id: str
    name: str = ""


@dataclass(frozen=True)
class Link:
    from_station: str
    to_station: str
    length_m: float
    run_time_s: float

    def __post_init__(self):
        if self.length_m <= 0 or self.run_time_s <= 0:
            raise NetworkError(f"link {self.from_station}-{self.to_station} needs positive length and run time")


@dataclass(frozen=True)
class Line:
    """A line; ``stations`` is the order travelled in the ``up`` direction."""

    id: str
    stations: tuple[str, ...]
    links: tuple[Link, ...]

    def __post_init__(self):
        if len(self.stations) < 2:
            raise NetworkError(f"line {self.id} needs at least two stations")
        if len(self.links) != len(self.stations) - 1:
            raise NetworkError(f"line {self.id}: expected {len(self.stations) - 1} links")
        for a, b, link in zip(self.stations, self.stations[1:], self.links):
            if link_key(a, b) != link_key(link.from_station, link.to_station):
                raise NetworkError(f"line {self.id}: link {link} does not join {a} and {b}")

    def ordered(self, direction: str) -> tuple[str, ...]:
        if direction == UP:
            return self.stations
        if direction == DOWN:
            return self.stations[::-1]
        raise NetworkError(f"unknown direction {direction!r}")

    def direction_between(self, board: str, alight: str) -> str:
        try:
            i, j = self.stations.index(board), self.stations.index(alight)
        except ValueError:
            raise NetworkError(f"line {self.id} does not serve both {board} and {alight}") from None
        if i == j:
            raise NetworkError("boarding and alighting stations coincide")
        return UP if j > i else DOWN

    def links_between(self, board: str, alight: str) -> list[Link]:
        i, j = self.stations.index(board), self.stations.index(alight)
        lo, hi = min(i, j), max(i, j)
        return list(self.links[lo:hi])


@dataclass(frozen=True)
class Network:
    stations: Mapping[str, Station]
    lines: Mapping[str, Line]
    dwell_s: float = 30.0

    def __post_init__(self):
        for line in self.lines.values():
            for s in line.stations:
                if s not in self.stations:
                    raise NetworkError(f"line {line.id} references unknown station {s}")

    def link_length(self, a: str, b: str) -> float:
        key = link_key(a, b)
        for line in self.lines.values():
            for link in line.links:
                if link_key(link.from_station, link.to_station) == key:
                    return link.length_m
        raise NetworkError(f"no link between {a} and {b}")

    def segment(self, line_id: str, board: str, alight: str) -> "PathSegment":
        line = self.lines[line_id]
        return PathSegment(line_id, board, alight, line.direction_between(board, alight))

    def ride_time_s(self, segment: "PathSegment") -> float:
        """Scheduled in-vehicle time of a segment, including intermediate dwells."""
        links = self.lines[segment.line].links_between(segment.board, segment.alight)
        return sum(l.run_time_s for l in links) + self.dwell_s * (len(links) - 1)

    def make_path(self, path_id: str, legs: Sequence[tuple[str, str, str]],
                  attributes: Mapping[str, float] | None = None, panel: bool = False) -> "Path":
        """Build a path from ``(line, board, alight)`` legs."""
        segments = tuple(self.segment(*leg) for leg in legs)
        links: list[tuple[tuple[str, str], float]] = []
        for seg in segments:
            for link in self.lines[seg.line].links_between(seg.board, seg.alight):
                links.append((link_key(link.from_station, link.to_station), link.length_m))
        return Path(path_id, segments, tuple(links), dict(attributes or {}), panel=panel)

    def to_dict(self) -> dict:
        return {
            "dwell_s": self.dwell_s,
            "stations": [{"id": s.id, "name": s.name} for s in self.stations.values()],
            "lines": [
                {
                    "id": line.id,
                    "stations": list(line.stations),
                    "links": [
                        {"from": l.from_station, "to": l.to_station,
                         "length_m": l.length_m, "run_time_s": l.run_time_s}
                        for l in line.links
                    ],
                }
                for line in self.lines.values()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Network":
        stations = {s["id"]: Station(s["id"], s.get("name", "")) for s in data["stations"]}
        lines = {}
        for ld in data["lines"]:
            links = tuple(Link(l["from"], l["to"], float(l["length_m"]), float(l["run_time_s"]))
                          for l in ld["links"])
            lines[ld["id"]] = Line(ld["id"], tuple(ld["stations"]), links)
        return cls(stations, lines, float(data.get("dwell_s", 30.0)))


@dataclass(frozen=True)
class PathSegment:
    line: str
    board: str
    alight: str
    direction: str

    def __post_init__(self):
        if self.board == self.alight:
            raise NetworkError("segment boarding and alighting stations must differ")
        if self.direction not in DIRECTIONS:
            raise NetworkError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class Path:
    """A path through the network.

    ``links`` holds ``(link_key, length_m)`` for every link traversed.
    ``panel`` marks the alternatives that carry the passenger-level panel
    term when the model attaches it to a designated subset.
    """

    id: str
    segments: tuple[PathSegment, ...]
    links: tuple[tuple[tuple[str, str], float], ...]
    attributes: Mapping[str, float] = field(default_factory=dict)
    path_size: float | None = None
    panel: bool = False

    def __post_init__(self):
        if not self.segments:
            raise NetworkError(f"path {self.id} has no segments")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.alight != b.board:
                raise NetworkError(f"path {self.id}: segments do not chain at {a.alight}/{b.board}")

    @property
    def origin(self) -> str:
        return self.segments[0].board

    @property
    def destination(self) -> str:
        return self.segments[-1].alight

    @property
    def length_m(self) -> float:
        return float(sum(length for _, length in self.links))

    @property
    def n_transfers(self) -> int:
        return len(self.segments) - 1

    def link_set(self) -> set[tuple[str, str]]:
        return {key for key, _ in self.links}

    def stations(self) -> list[str]:
        out = [self.segments[0].board]
        for seg in self.segments:
            out.append(seg.alight)
        return out


@dataclass(frozen=True)
class ChoiceSet:
    origin: str
    destination: str
    paths: tuple[Path, ...]

    def __post_init__(self):
        if not self.paths:
            raise NetworkError(f"empty choice set for {self.origin}-{self.destination}")
        for p in self.paths:
            if p.origin != self.origin or p.destination != self.destination:
                raise NetworkError(f"path {p.id} does not connect {self.origin}-{self.destination}")

    @property
    def od(self) -> tuple[str, str]:
        return (self.origin, self.destination)

    def index(self, path_id: str) -> int:
        for i, p in enumerate(self.paths):
            if p.id == path_id:
                return i
        raise KeyError(path_id)


def path_size(path: Path, choice_set: ChoiceSet) -> float:
    """Path-size overlap factor of ``path`` within ``choice_set``.

    Each link contributes its length divided by the number of paths in the
    set that use it; the sum is normalised by the path's own length.
    """
    if all(p.id != path.id for p in choice_set.paths):
        raise NetworkError(f"path {path.id} is not in the choice set")
    total = path.length_m
    if total <= 0:
        raise NetworkError(f"path {path.id} has zero length")
    sets = [p.link_set() for p in choice_set.paths]
    acc = 0.0
    for key, length in path.links:
        if length <= 0:
            raise NetworkError(f"non-positive link length on path {path.id}")
        acc += length / sum(key in s for s in sets)
    return acc / total


def with_path_sizes(choice_set: ChoiceSet) -> ChoiceSet:
    """Return a copy whose paths carry their path-size factors."""
    paths = []
    for p in choice_set.paths:
        ps = path_size(p, choice_set)
        attrs = dict(p.attributes)
        attrs["log_ps"] = float(np.log(ps))
        paths.append(Path(p.id, p.segments, p.links, attrs, path_size=ps, panel=p.panel))
    return ChoiceSet(choice_set.origin, choice_set.destination, tuple(paths))


# -- timetable ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainRun:
    line: str
    direction: str
    run_id: int
    stations: tuple[str, ...]
    arrival_s: tuple[int, ...]
    departure_s: tuple[int, ...]


class Service:
    """All runs of one line in one direction, as dense arrays.

    ``arrivals[r, s]`` and ``departures[r, s]`` are indexed by run id and by
    the station's position in travel order.
    """

    def __init__(self, line: str, direction: str, stations: Sequence[str],
                 arrivals: np.ndarray, departures: np.ndarray):
        self.line = line
        self.direction = direction
        self.stations = tuple(stations)
        self.arrivals = np.asarray(arrivals, dtype=np.int64)
        self.departures = np.asarray(departures, dtype=np.int64)
        self.arrivals.setflags(write=False)
        self.departures.setflags(write=False)
        self._pos = {s: i for i, s in enumerate(self.stations)}
        if self.arrivals.shape != self.departures.shape or self.arrivals.shape[1] != len(self.stations):
            raise NetworkError(f"service {line}/{direction}: array shapes do not match stations")
        if np.any(self.departures < self.arrivals):
            raise NetworkError(f"service {line}/{direction}: departure before arrival")
        if np.any(self.arrivals[:, 1:] <= self.departures[:, :-1]):
            raise NetworkError(f"service {line}/{direction}: times must increase along the line")
        if len(self.departures) > 1 and (np.any(np.diff(self.departures, axis=0) < 0)
                                         or np.any(np.diff(self.arrivals, axis=0) < 0)):
            raise NetworkError(f"service {line}/{direction}: runs overtake each other")

    @property
    def n_runs(self) -> int:
        return self.departures.shape[0]

    def position(self, station: str) -> int:
        try:
            return self._pos[station]
        except KeyError:
            raise NetworkError(f"{station} is not served by {self.line}/{self.direction}") from None

    def runs(self) -> Iterable[TrainRun]:
        for r in range(self.n_runs):
            yield TrainRun(self.line, self.direction, r, self.stations,
                           tuple(int(v) for v in self.arrivals[r]),
                           tuple(int(v) for v in self.departures[r]))


class Timetable:
    """AVL train movements for one service day, keyed by ``(line, direction)``."""

    def __init__(self, services: Mapping[tuple[str, str], Service]):
        self.services = dict(services)

    def service(self, line: str, direction: str) -> Service:
        try:
            return self.services[(line, direction)]
        except KeyError:
            raise LookupError(f"no service for line {line} direction {direction}") from None

    def _lookup(self, segment: PathSegment, run_id: int) -> tuple[Service, int]:
        svc = self.service(segment.line, segment.direction)
        if not 0 <= run_id < svc.n_runs:
            raise LookupError(f"run {run_id} does not exist on {segment.line}/{segment.direction}")
        return svc, run_id

    def departure(self, segment: PathSegment, run_id: int) -> int:
        svc, r = self._lookup(segment, run_id)
        return int(svc.departures[r, svc.position(segment.board)])

    def arrival(self, segment: PathSegment, run_id: int) -> int:
        svc, r = self._lookup(segment, run_id)
        return int(svc.arrivals[r, svc.position(segment.alight)])

    def segment_times(self, segment: PathSegment) -> tuple[np.ndarray, np.ndarray]:
        """Departure-at-boarding and arrival-at-alighting arrays over all runs."""
        svc = self.service(segment.line, segment.direction)
        b, a = svc.position(segment.board), svc.position(segment.alight)
        if a <= b:
            raise NetworkError(f"segment {segment} runs against the service direction")
        return svc.departures[:, b], svc.arrivals[:, a]

    def trains_for_segment(self, segment: PathSegment, window: tuple[float, float]) -> list[int]:
        start, end = window
        if not start < end:
            raise NetworkError("time window must have start < end")
        dep, _ = self.segment_times(segment)
        lo = int(np.searchsorted(dep, start, side="left"))
        hi = int(np.searchsorted(dep, end, side="right"))
        return list(range(lo, hi))

    def runs(self) -> Iterable[TrainRun]:
        for key in sorted(self.services):
            yield from self.services[key].runs()

    def to_csv(self, path: str | FsPath) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMETABLE_COLUMNS)
            for run in self.runs():
                for s, a, d in zip(run.stations, run.arrival_s, run.departure_s):
                    w.writerow([run.line, run.direction, run.run_id, s, a, d])

    @classmethod
    def from_csv(cls, path: str | FsPath, network: Network) -> "Timetable":
        rows: dict[tuple[str, str], dict[int, dict[str, tuple[int, int]]]] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TIMETABLE_COLUMNS:
                raise NetworkError(f"timetable header must be {','.join(TIMETABLE_COLUMNS)}")
            for row in reader:
                key = (row["line_id"], row["direction"])
                rows.setdefault(key, {}).setdefault(int(row["run_id"]), {})[row["station_id"]] = (
                    int(row["arrival_s"]), int(row["departure_s"]))
        services = {}
        for (line_id, direction), runs in rows.items():
            stations = network.lines[line_id].ordered(direction)
            ids = sorted(runs)
            if ids != list(range(len(ids))):
                raise NetworkError(f"run ids for {line_id}/{direction} are not dense from 0")
            arr = np.array([[runs[r][s][0] for s in stations] for r in ids])
            dep = np.array([[runs[r][s][1] for s in stations] for r in ids])
            services[(line_id, direction)] = Service(line_id, direction, stations, arr, dep)
        return cls(services)


# -- path-set file -----------------------------------------------------------

def choice_sets_to_dict(choice_sets: Mapping[tuple[str, str], ChoiceSet]) -> dict:
    out = {}
    for (o, d), cs in sorted(choice_sets.items()):
        out[f"{o}-{d}"] = [
            {
                "id": p.id,
                "segments": [[s.line, s.board, s.alight] for s in p.segments],
                "attributes": dict(p.attributes),
                "panel": p.panel,
            }
            for p in cs.paths
        ]
    return out


def choice_sets_from_dict(data: Mapping, network: Network) -> dict[tuple[str, str], ChoiceSet]:
    out = {}
    for od, plist in data.items():
        o, d = od.split("-")
        paths = tuple(network.make_path(p["id"], [tuple(s) for s in p["segments"]],
                                        p.get("attributes"), bool(p.get("panel", False)))
                      for p in plist)
        out[(o, d)] = with_path_sizes(ChoiceSet(o, d, paths))
    return out


def save_json(obj, path: str | FsPath) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: str | FsPath):
    with open(path) as fh:
        return json.load(fh)
