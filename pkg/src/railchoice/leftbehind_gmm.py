"""Left-behind probabilities from journey-time distributions.

Journey times on a crowded single-line OD cluster around the free-flow time
plus multiples of a headway, one cluster per left-behind count. A Gaussian
mixture whose means are held about a headway apart is fitted by constrained
EM; its weights are the left-behind probabilities.

Raw tap-out minus tap-in times blur those clusters, because the wait for the
first train is spread over a whole headway. ``reference_journeys`` therefore
measures each journey from the departure of the first train the passenger
could have reached, and keeps only trips whose first reachable train is
unambiguous under the access-walk distribution.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear
from scipy.special import logsumexp

from .ptam import LeftBehindProfile
from .transit_core import Network, NetworkError, PathSegment, Timetable
from .walktime import WalkModel

JOURNEY_COLUMNS = ("passenger_id", "od", "period", "journey_s")
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ConstraintError(ValueError):
    """The mixture constraints cannot be satisfied."""


@dataclass(frozen=True)
class JourneyTimeSample:
    """Journey times (tap-out minus tap-in, seconds) for one OD and period."""

    od: str
    period: int
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("journey times must be a finite, positive 1-d array")
        object.__setattr__(self, "times", t)

    @property
    def size(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class MixtureConstraints:
    """Headway ``h`` and free-flow prior for the first component mean (seconds).

    Consecutive means must be ``h * (1 +/- gap_slack)`` apart and the first
    mean within ``prior_slack`` of ``prior`` (default half a headway).
    """

    headway: float
    prior: float
    gap_slack: float = 0.25
    prior_slack: float | None = None
    min_sd: float = 1.0

    def __post_init__(self):
        if not (self.headway > 0 and math.isfinite(self.headway) and math.isfinite(self.prior)):
            raise ConstraintError("headway must be positive and the prior finite")
        if not 0 <= self.gap_slack < 1:
            raise ConstraintError("gap slack must lie in [0, 1)")
        if self.prior_slack is not None and self.prior_slack < 0:
            raise ConstraintError("prior slack must be non-negative")
        if self.min_sd <= 0:
            raise ConstraintError("minimum component sd must be positive")

    @property
    def eps0(self) -> float:
        return 0.5 * self.headway if self.prior_slack is None else self.prior_slack


@dataclass(frozen=True)
class MixtureFit:
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    n: int

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "sds": self.sds.tolist(),
                "loglik": self.loglik, "iterations": self.iterations, "converged": self.converged, "n": self.n}


class ConvergenceError(RuntimeError):
    """EM hit the iteration cap; ``best`` holds the best fit reached."""

    def __init__(self, message: str, best: MixtureFit):
        super().__init__(message)
        self.best = best


def mixture_loglik(t: np.ndarray, weights, means, sds) -> float:
    return float(np.sum(logsumexp(_component_logpdf(t, weights, means, sds), axis=1)))


def _component_logpdf(t, weights, means, sds) -> np.ndarray:
    t = np.asarray(t, dtype=float)[:, None]
    sds = np.asarray(sds, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(weights, dtype=float))
    return lw - 0.5 * ((t - means) / sds) ** 2 - np.log(sds) - _LOG_SQRT_2PI


def _project_means(m: np.ndarray, prec: np.ndarray, cons: MixtureConstraints) -> np.ndarray:
    """Weighted least-squares projection of component means onto the constraint set.

    Means are parameterised as ``mu_0`` plus cumulative gaps, which turns the
    constraints into box bounds.
    """
    C = len(m) - 1
    h, eps = cons.headway, cons.gap_slack
    A = np.tril(np.ones((C + 1, C + 1)))
    w = np.sqrt(prec)
    lb = np.array([cons.prior - cons.eps0] + [h * (1 - eps)] * C)
    ub = np.array([cons.prior + cons.eps0] + [h * (1 + eps)] * C)
    if cons.eps0 == 0:
        ub[0] = lb[0] + 1e-12
    if eps == 0:
        ub[1:] = lb[1:] + 1e-12
    sol = lsq_linear(A * w[:, None], m * w, bounds=(lb, ub), method="bvls", tol=1e-12)
    return A @ np.clip(sol.x, lb, ub)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, len(v) + 1) > css - 1)[0][-1]
    tau = (css[rho] - 1) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def initial_fit(C: int, cons: MixtureConstraints) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic start: means one headway apart from the prior, sd h/4, uniform weights."""
    means = cons.prior + cons.headway * np.arange(C + 1)
    sds = np.full(C + 1, cons.headway / 4.0)
    weights = np.full(C + 1, 1.0 / (C + 1))
    return weights, means, sds


def fit_mixture(sample: JourneyTimeSample | Sequence[float], C: int, constraints: MixtureConstraints,
                max_iter: int = 2000, tol: float = 1e-9) -> MixtureFit:
    """Constrained maximum-likelihood Gaussian mixture with ``C + 1`` components.

    Each iteration is an E-step followed by a conditional M-step: weights are
    closed-form (then projected onto the simplex), means solve the weighted
    least-squares problem under the gap and prior bounds, and sds are
    closed-form given the means. Every step is a conditional maximiser, so the
    log-likelihood never decreases.
    """
    t = sample.times if isinstance(sample, JourneyTimeSample) else JourneyTimeSample("", 0, sample).times
    if C < 0:
        raise ValueError("C must be non-negative")
    n = len(t)
    if n < 10 * (C + 1):
        raise ValueError(f"need at least {10 * (C + 1)} journey times for {C + 1} components, got {n}")
    if C == 0:
        mu, sd = float(t.mean()), float(t.std())
        sd = max(sd, constraints.min_sd)
        w = np.ones(1)
        return MixtureFit(w, np.array([mu]), np.array([sd]), mixture_loglik(t, w, [mu], [sd]), 0, True, n)

    w, mu, sd = initial_fit(C, constraints)
    ll = mixture_loglik(t, w, mu, sd)
    best = (ll, w, mu, sd)
    for it in range(1, max_iter + 1):
        logp = _component_logpdf(t, w, mu, sd)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        nk = resp.sum(axis=0)
        w = _project_simplex(nk / n)
        safe = np.maximum(nk, 1e-12)
        m = resp.T @ t / safe
        mu = _project_means(m, safe / sd ** 2, constraints)
        sd = np.sqrt(np.einsum("nc,nc->c", resp, (t[:, None] - mu) ** 2) / safe)
        sd = np.maximum(sd, constraints.min_sd)
        new = mixture_loglik(t, w, mu, sd)
        if new > best[0]:
            best = (new, w, mu, sd)
        if abs(new - ll) <= tol * max(1.0, abs(ll)):
            return MixtureFit(best[1], best[2], best[3], best[0], it, True, n)
        ll = new
    fit = MixtureFit(best[1], best[2], best[3], best[0], max_iter, False, n)
    raise ConvergenceError(f"EM did not converge in {max_iter} iterations", fit)


def to_leftbehind_vector(fit: MixtureFit) -> tuple[float, ...]:
    """Mixture weights read as probabilities of being left behind 0..C times."""
    w = np.asarray(fit.weights, dtype=float)
    w = w / w.sum()
    return tuple(float(x) for x in w)


def read_journeys(path: str | FsPath) -> list[tuple[str, str, int, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != JOURNEY_COLUMNS:
            raise ValueError(f"journey-time header must be {','.join(JOURNEY_COLUMNS)}")
        return [(r["passenger_id"], r["od"], int(r["period"]), float(r["journey_s"])) for r in reader]


def group_journeys(rows: Sequence[tuple[str, str, int, float]], pool_periods: bool = False
                   ) -> dict[tuple[str, int], JourneyTimeSample]:
    """Samples keyed by ``(od, period)``; with ``pool_periods`` every period shares one sample (period -1)."""
    acc: dict[tuple[str, int], list[float]] = defaultdict(list)
    for _, od, period, j in rows:
        acc[(od, -1 if pool_periods else period)].append(j)
    return {k: JourneyTimeSample(k[0], k[1], np.array(v)) for k, v in sorted(acc.items())}


def merge_vectors(vectors: Sequence[tuple[float, ...]], sizes: Sequence[int]) -> tuple[float, ...]:
    """Sample-size weighted average of left-behind vectors of equal length."""
    v = np.asarray(vectors, dtype=float)
    s = np.asarray(sizes, dtype=float)
    out = (v * s[:, None]).sum(axis=0) / s.sum()
    return tuple(float(x) for x in out / out.sum())


# -- journeys from tap records ---------------------------------------------------

def single_line_segment(network: Network, origin: str, destination: str) -> PathSegment:
    """The one-line segment serving ``origin -> destination``; calibration ODs need no transfer."""
    for line in sorted(network.lines.values(), key=lambda l: l.id):
        if origin in line.stations and destination in line.stations:
            return network.segment(line.id, origin, destination)
    raise NetworkError(f"no single line serves {origin}-{destination}")


def journey_prior(network: Network, walk: WalkModel, segment: PathSegment) -> float:
    """Free-flow referenced journey time: scheduled ride plus mean egress walk (seconds)."""
    return network.ride_time_s(segment) + walk.egress(segment.alight).mean


def reference_journeys(trips: Sequence, network: Network, timetable: Timetable, walk: WalkModel,
                       period_s: int = 900, z: float = 1.645) -> list[tuple[str, str, int, float]]:
    """Journey rows ``(passenger_id, "O-D", period, seconds)`` measured from the first reachable train.

    With access-walk quantiles ``lo, hi = exp(loc -/+ z * scale)``, the first
    reachable train departs at or after ``t_in + lo``. A trip is kept only when
    that departure is also at or after ``t_in + hi``, so the passenger almost
    surely reached the platform before it left. The period is that of the
    departure, matching the left-behind lookup.
    """
    rows = []
    cache: dict[tuple[str, str], tuple] = {}
    for t in trips:
        key = (t.origin, t.destination)
        if key not in cache:
            seg = single_line_segment(network, *key)
            acc = walk.access(seg.board)
            lo, hi = math.exp(acc.loc - z * acc.scale), math.exp(acc.loc + z * acc.scale)
            cache[key] = (timetable.segment_times(seg)[0], lo, hi)
        dep, lo, hi = cache[key]
        i = int(np.searchsorted(dep, t.t_in + lo, side="left"))
        if i >= len(dep) or dep[i] < t.t_in + hi:
            continue
        journey = float(t.t_out - dep[i])
        if journey <= 0:
            continue
        period = int(dep[i]) - int(dep[i]) % period_s
        rows.append((t.passenger_id, f"{t.origin}-{t.destination}", period, journey))
    return rows


def write_journeys(rows: Sequence[tuple[str, str, int, float]], path: str | FsPath) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(JOURNEY_COLUMNS)
        for pid, od, period, j in rows:
            w.writerow([pid, od, period, repr(float(j))])


@dataclass(frozen=True)
class CellFit:
    """One fitted (OD, period) cell and the platform it calibrates."""

    od: str
    period: int
    platform: tuple[str, str, str]
    fit: MixtureFit

    def to_dict(self) -> dict:
        return {"od": self.od, "period": self.period, "platform": list(self.platform), **self.fit.to_dict()}


def calibrate_profile(rows: Sequence[tuple[str, str, int, float]], network: Network, walk: WalkModel,
                      C: int, headway: float, period_s: int = 900, pool_periods: bool = True,
                      gap_slack: float = 0.25, prior_slack: float | None = None,
                      max_iter: int = 2000) -> tuple[LeftBehindProfile, list[CellFit]]:
    """Fit one mixture per OD (and period unless pooled) and map the weights onto platform cells.

    A pooled fit is written to every period in which the OD was observed.
    Cells with fewer than ``10 (C + 1)`` journeys are skipped with a warning.
    Platforms never calibrated fall back to "never left behind".
    """
    periods: dict[str, set[int]] = defaultdict(set)
    for _, od, period, _ in rows:
        periods[od].add(period)
    cells: dict[tuple[str, str, str, int], tuple[float, ...]] = {}
    fits: list[CellFit] = []
    for (od, period), sample in group_journeys(rows, pool_periods).items():
        origin, destination = od.split("-", 1)
        seg = single_line_segment(network, origin, destination)
        platform = (seg.board, seg.line, seg.direction)
        if sample.size < 10 * (C + 1):
            warnings.warn(f"skipping {od} period {period}: {sample.size} journeys, need {10 * (C + 1)}")
            continue
        cons = MixtureConstraints(headway, journey_prior(network, walk, seg), gap_slack, prior_slack)
        try:
            fit = fit_mixture(sample, C, cons, max_iter=max_iter)
        except ConvergenceError as exc:
            warnings.warn(f"{od} period {period}: {exc}; using best iterate")
            fit = exc.best
        fits.append(CellFit(od, period, platform, fit))
        vec = to_leftbehind_vector(fit)
        for p in (sorted(periods[od]) if period == -1 else [period]):
            cells[(*platform, p)] = vec
    return LeftBehindProfile(cells, period_s), fits
