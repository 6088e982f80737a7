"""Walking-time distributions for access, egress and transfer walks.

Walking speed is lognormal, so walking time over a fixed distance is lognormal
too: ``log T = log d - log V``. Interval probabilities use the closed-form CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def lognormal_log_params(mean: float, sd: float) -> tuple[float, float]:
    """Location and scale of ``log X`` for a lognormal with given mean and sd."""
    if mean <= 0 or sd <= 0:
        raise ValueError("lognormal mean and sd must be positive")
    s2 = math.log1p((sd / mean) ** 2)
    return math.log(mean) - 0.5 * s2, math.sqrt(s2)


@dataclass(frozen=True)
class WalkDistribution:
    """Lognormal walking time (seconds): ``log T ~ N(loc, scale^2)``."""

    loc: float
    scale: float
    family: str = "lognormal"

    def __post_init__(self):
        if self.family != "lognormal":
            raise ValueError(f"unsupported walk-time family {self.family!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def from_speed(cls, distance_m: float, speed_mean: float, speed_sd: float) -> "WalkDistribution":
        if distance_m <= 0:
            raise ValueError("walk distance must be positive")
        mu, s = lognormal_log_params(speed_mean, speed_sd)
        return cls(math.log(distance_m) - mu, s)

    @property
    def mean(self) -> float:
        return math.exp(self.loc + 0.5 * self.scale ** 2)

    @property
    def mode(self) -> float:
        return math.exp(self.loc - self.scale ** 2)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        z = (np.log(t[pos]) - self.loc) / self.scale
        out[pos] = np.exp(-0.5 * z * z) / (t[pos] * self.scale * _SQRT_2PI)
        return out if out.ndim else float(out)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = ndtr((np.log(t[pos]) - self.loc) / self.scale)
        return out if out.ndim else float(out)

    def interval_probability(self, a: float, b: float) -> float:
        if a > b:
            raise ValueError(f"interval lower bound {a} exceeds upper bound {b}")
        if b <= 0 or a == b:
            return 0.0
        p = self.cdf(b) - self.cdf(a)
        return min(max(float(p), 0.0), 1.0)

    def sample(self, rng: np.random.Generator, size=None):
        return np.exp(self.loc + self.scale * rng.standard_normal(size))


def density(dist: WalkDistribution, t):
    return dist.density(t)


def interval_probability(dist: WalkDistribution, a: float, b: float) -> float:
    return dist.interval_probability(a, b)


@dataclass(frozen=True)
class WalkModel:
    """Walk geometry plus the population walking-speed distribution.

    ``gate_m`` is the gate-to-platform distance per station, used for both
    access and egress. ``transfer_m`` is keyed ``"station:from_line:to_line"``;
    ``transfer_default_m`` covers station pairs that are not listed.
    """

    speed_mean: float = 1.2
    speed_sd: float = 0.5
    gate_m: Mapping[str, float] = field(default_factory=dict)
    transfer_m: Mapping[str, float] = field(default_factory=dict)
    transfer_default_m: float = 40.0

    def _dist(self, d: float) -> WalkDistribution:
        return WalkDistribution.from_speed(d, self.speed_mean, self.speed_sd)

    def access(self, station: str) -> WalkDistribution:
        return self._dist(self.gate_m[station])

    def egress(self, station: str) -> WalkDistribution:
        return self._dist(self.gate_m[station])

    def transfer_distance(self, station: str, from_line: str, to_line: str) -> float:
        return self.transfer_m.get(f"{station}:{from_line}:{to_line}", self.transfer_default_m)

    def transfer(self, station: str, from_line: str, to_line: str) -> WalkDistribution:
        return self._dist(self.transfer_distance(station, from_line, to_line))

    def perturbed(self, mean_factor: float, sd_factor: float) -> "WalkModel":
        """Same geometry with speed mean and sd scaled."""
        return WalkModel(self.speed_mean * mean_factor, self.speed_sd * sd_factor,
                         dict(self.gate_m), dict(self.transfer_m), self.transfer_default_m)

    def to_dict(self) -> dict:
        return {
            "speed_mean": self.speed_mean,
            "speed_sd": self.speed_sd,
            "gate_m": dict(sorted(self.gate_m.items())),
            "transfer_m": dict(sorted(self.transfer_m.items())),
            "transfer_default_m": self.transfer_default_m,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "WalkModel":
        return cls(float(data["speed_mean"]), float(data["speed_sd"]),
                   {k: float(v) for k, v in data["gate_m"].items()},
                   {k: float(v) for k, v in data.get("transfer_m", {}).items()},
                   float(data.get("transfer_default_m", 40.0)))
