"""Passenger-to-train assignment: tap-out densities given tap-in time and path.

A passenger who taps in at ``t_in`` walks to the platform, may be left behind
``k`` times, rides, walks to the next platform at each transfer, and finally
walks to the exit gate. Summing over every feasible itinerary gives the
density of the observed tap-out time for each candidate path.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .transit_core import ChoiceSet, Path, PathSegment, Timetable
from .walktime import WalkDistribution, WalkModel

Itinerary = tuple[int, ...]

PROFILE_COLUMNS = ("station", "line", "direction", "period_start_s", "k", "probability")


class ConfigurationError(ValueError):
    """Missing or malformed left-behind configuration."""


@dataclass(frozen=True)
class LeftBehindProfile:
    """Left-behind count distributions per platform and time period.

    ``cells`` maps ``(station, line, direction, period_start_s)`` to a
    probability vector over ``k = 0..C``. Platforms without a cell fall back
    to ``default``; ``default=None`` makes a missing cell an error.
    """

    cells: Mapping[tuple[str, str, str, int], tuple[float, ...]] = field(default_factory=dict)
    period_s: int = 900
    default: tuple[float, ...] | None = (1.0,)

    def __post_init__(self):
        for key, vec in self.cells.items():
            v = np.asarray(vec, dtype=float)
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ConfigurationError(f"left-behind vector for {key} is not a distribution")

    def period_of(self, t: float) -> int:
        return int(math.floor(t / self.period_s)) * self.period_s

    def vector(self, station: str, line: str, direction: str, t: float) -> np.ndarray:
        vec = self.cells.get((station, line, direction, self.period_of(t)))
        if vec is None:
            if self.default is None:
                raise ConfigurationError(
                    f"no left-behind vector for {station}/{line}/{direction} at t={t}")
            vec = self.default
        return np.asarray(vec, dtype=float)

    @classmethod
    def constant(cls, platforms: Mapping[tuple[str, str, str], Sequence[float]],
                 start_s: int, end_s: int, period_s: int = 900) -> "LeftBehindProfile":
        """Same vector in every period of ``[start_s, end_s)`` for each platform."""
        cells = {}
        for (station, line, direction), vec in platforms.items():
            for p in range(start_s - start_s % period_s, end_s, period_s):
                cells[(station, line, direction, p)] = tuple(float(x) for x in vec)
        return cls(cells, period_s)

    def to_csv(self, path: str | FsPath) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PROFILE_COLUMNS)
            for key in sorted(self.cells):
                for k, p in enumerate(self.cells[key]):
                    w.writerow([*key, k, repr(float(p))])

    @classmethod
    def from_csv(cls, path: str | FsPath, period_s: int = 900,
                 default: tuple[float, ...] | None = (1.0,)) -> "LeftBehindProfile":
        acc: dict[tuple[str, str, str, int], dict[int, float]] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != PROFILE_COLUMNS:
                raise ConfigurationError(f"left-behind header must be {','.join(PROFILE_COLUMNS)}")
            for row in reader:
                key = (row["station"], row["line"], row["direction"], int(row["period_start_s"]))
                acc.setdefault(key, {})[int(row["k"])] = float(row["probability"])
        cells = {}
        for key, probs in acc.items():
            if sorted(probs) != list(range(len(probs))):
                raise ConfigurationError(f"left-behind counts for {key} are not 0..C")
            cells[key] = tuple(probs[k] for k in range(len(probs)))
        return cls(cells, period_s, default)


# -- itineraries -------------------------------------------------------------

def _latest_arrivals(path: Path, timetable: Timetable, t_out: float) -> list[float]:
    """Latest arrival at each segment's alighting station still compatible with ``t_out``."""
    segs = path.segments
    latest = [0.0] * len(segs)
    latest[-1] = t_out
    for j in range(len(segs) - 1, 0, -1):
        dep, arr = timetable.segment_times(segs[j])
        hi = int(np.searchsorted(arr, latest[j], side="right")) - 1
        latest[j - 1] = float(dep[hi]) if hi >= 0 else -math.inf
    return latest


def feasible_itineraries(t_in: float, t_out: float, path: Path, timetable: Timetable,
                         max_lb: Sequence[int] | None = None) -> list[Itinerary]:
    """All train sequences that fit between tap-in and tap-out.

    The first train departs no earlier than ``t_in``, the last arrives no later
    than ``t_out``, and every connecting train departs no earlier than the
    previous one arrives. ``max_lb[j]``, if given, limits segment ``j`` to at
    most that many trains after the first one departing after the anchor time.
    Output is sorted lexicographically.
    """
    segs = path.segments
    times = [timetable.segment_times(s) for s in segs]
    latest = _latest_arrivals(path, timetable, t_out)
    his = [int(np.searchsorted(arr, latest[j], side="right")) - 1 for j, (_, arr) in enumerate(times)]
    out: list[Itinerary] = []

    def extend(j: int, anchor: float, prefix: tuple[int, ...]):
        dep, arr = times[j]
        lo = int(np.searchsorted(dep, anchor, side="left"))
        hi = his[j]
        if max_lb is not None:
            hi = min(hi, lo + max_lb[j])
        for r in range(lo, hi + 1):
            if j == len(segs) - 1:
                out.append(prefix + (r,))
            else:
                extend(j + 1, float(arr[r]), prefix + (r,))

    extend(0, t_in, ())
    return out


def feasible_itineraries_bruteforce(t_in: float, t_out: float, path: Path,
                                    timetable: Timetable) -> list[Itinerary]:
    """Cross-product filter over every run of every segment (test oracle)."""
    import itertools

    times = [timetable.segment_times(s) for s in path.segments]
    out = []
    for combo in itertools.product(*[range(len(d)) for d, _ in times]):
        if times[0][0][combo[0]] < t_in or times[-1][1][combo[-1]] > t_out:
            continue
        if all(times[j + 1][0][combo[j + 1]] >= times[j][1][combo[j]] for j in range(len(combo) - 1)):
            out.append(tuple(combo))
    return out


def max_left_behind(itinerary: Itinerary, j: int, feasible_set: Sequence[Itinerary]) -> int:
    """Largest ``k`` such that some feasible itinerary boards train ``I_j - k`` on segment ``j``."""
    earliest = min(h[j] for h in feasible_set)
    return max(itinerary[j] - earliest, 0)


# -- boarding probabilities --------------------------------------------------

def _window_masses(dep: np.ndarray, anchor: float, dist: WalkDistribution,
                   lo: int, hi: int) -> np.ndarray:
    """Mass of arriving at the platform between departures ``r-1`` and ``r`` for r in [lo, hi]."""
    r = np.arange(lo - 1, hi + 1)
    t = np.where(r >= 0, dep[np.clip(r, 0, None)] - anchor, -1.0).astype(float)
    c = np.zeros(len(t))
    pos = t > 0
    c[pos] = ndtr((np.log(t[pos]) - dist.loc) / dist.scale)
    return np.diff(c)


def _board_prob(dep: np.ndarray, anchor: float, run: int, dist: WalkDistribution,
                eta: np.ndarray, max_k: int) -> float:
    kmax = min(max_k, len(eta) - 1, run)
    if kmax < 0:
        return 0.0
    rho = _window_masses(dep, anchor, dist, run - kmax, run)[::-1]  # rho[k] is window of run-k
    return float(np.dot(rho, eta[: kmax + 1]))


def boarding_probability_first(t_in: float, segment: PathSegment, run: int, timetable: Timetable,
                               access: WalkDistribution, eta: Sequence[float], max_k: int) -> float:
    """Probability of boarding ``run`` on the first segment, summed over left-behind counts."""
    dep, _ = timetable.segment_times(segment)
    return _board_prob(dep, t_in, run, access, np.asarray(eta, float), max_k)


def boarding_probability_transfer(prev_arrival: float, segment: PathSegment, run: int,
                                  timetable: Timetable, transfer: WalkDistribution,
                                  eta: Sequence[float], max_k: int) -> float:
    """Probability of boarding ``run`` after alighting the previous train at ``prev_arrival``."""
    dep, _ = timetable.segment_times(segment)
    return _board_prob(dep, prev_arrival, run, transfer, np.asarray(eta, float), max_k)


def _path_walks(path: Path, walk: WalkModel) -> list[WalkDistribution]:
    segs = path.segments
    dists = [walk.access(segs[0].board)]
    for a, b in zip(segs, segs[1:]):
        dists.append(walk.transfer(b.board, a.line, b.line))
    dists.append(walk.egress(segs[-1].alight))
    return dists


def _left_behind_mass(lb: LeftBehindProfile, seg: PathSegment, t: float, k: int) -> float:
    vec = lb.vector(seg.board, seg.line, seg.direction, t)
    return float(vec[k]) if k < len(vec) else 0.0


def tapout_probability(t_in: float, t_out: float, path: Path, timetable: Timetable,
                       lb: LeftBehindProfile, walk: WalkModel) -> float:
    """Density (1/s) of tapping out at ``t_out`` given tap-in at ``t_in`` on ``path``."""
    omega = feasible_itineraries(t_in, t_out, path, timetable)
    if not omega:
        return 0.0
    segs = path.segments
    J = len(segs)
    walks = _path_walks(path, walk)
    times = [timetable.segment_times(s) for s in segs]
    earliest = [min(h[j] for h in omega) for j in range(J)]

    memo: dict[tuple[int, int, float], float] = {}

    def board(j: int, run: int, anchor: float) -> float:
        key = (j, run, anchor)
        p = memo.get(key)
        if p is None:
            dep = times[j][0]
            seg = segs[j]
            # left behind k times means the first reachable train was run - k;
            # its departure sets the period whose vector applies
            eta = [_left_behind_mass(lb, seg, float(dep[run - k]), k) for k in range(run - earliest[j] + 1)]
            p = _board_prob(dep, anchor, run, walks[j], np.array(eta), run - earliest[j])
            memo[key] = p
        return p

    total = 0.0
    egress = walks[-1]
    for h in omega:
        p = board(0, h[0], t_in)
        for j in range(1, J):
            if p == 0.0:
                break
            p *= board(j, h[j], float(times[j - 1][1][h[j - 1]]))
        if p > 0.0:
            total += p * egress.density(t_out - float(times[-1][1][h[-1]]))
    return total


def scheduled_out_of_vehicle_time(t_in: float, path: Path, timetable: Timetable, walk: WalkModel) -> float:
    """Out-of-vehicle minutes for ``path`` when tapping in at ``t_in``, with no left behind.

    The passenger walks at the mean walk time, boards the first train that
    departs after reaching the platform, and does the same at each transfer.
    Walks plus platform waits make up the total.
    """
    segs = path.segments
    walks = [d.mean for d in _path_walks(path, walk)]
    t = t_in + walks[0]
    total = walks[0] + walks[-1]
    for j, seg in enumerate(segs):
        if j > 0:
            t += walks[j]
            total += walks[j]
        dep, arr = timetable.segment_times(seg)
        r = int(np.searchsorted(dep, t, side="left"))
        if r >= len(dep):
            raise ValueError(f"no departure on {seg.line} from {seg.board} after t={t:.0f}")
        total += float(dep[r]) - t
        t = float(arr[r])
    return total / 60.0


# -- batch evaluation --------------------------------------------------------

def _density_chunk(args):
    rows, choice_sets, timetable, lb, walk, width = args
    out = np.zeros((len(rows), width))
    for i, (o, d, t_in, t_out) in enumerate(rows):
        for m, p in enumerate(choice_sets[(o, d)].paths):
            out[i, m] = tapout_probability(t_in, t_out, p, timetable, lb, walk)
    return out


def tapout_densities(trips: Sequence, choice_sets: Mapping[tuple[str, str], ChoiceSet],
                     timetable: Timetable, lb: LeftBehindProfile, walk: WalkModel,
                     threads: int = 1) -> np.ndarray:
    """Tap-out density for every (trip, path), shape ``(n_trips, max_paths)``.

    Columns beyond a trip's choice-set size are zero. Chunks are merged in
    input order, so the result does not depend on ``threads``.
    """
    rows = [(t.origin, t.destination, float(t.t_in), float(t.t_out)) for t in trips]
    width = max(len(cs.paths) for cs in choice_sets.values())
    if threads <= 1 or len(rows) < 2 * threads:
        return _density_chunk((rows, choice_sets, timetable, lb, walk, width))
    bounds = np.linspace(0, len(rows), threads + 1).astype(int)
    jobs = [(rows[a:b], choice_sets, timetable, lb, walk, width) for a, b in zip(bounds, bounds[1:])]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(_density_chunk, jobs))
    return np.vstack(parts)
