"""Latent-class path choice with a passenger-level panel term.

Passenger ``i`` belongs to class ``k`` with a multinomial-logit probability of
its characteristics. Within a class, path utilities are linear in the path
attributes plus a normally distributed panel term ``alpha`` that is constant
across the passenger's trips. The panel term is integrated out with the
midpoint rule on a fixed grid, and the likelihood of a full trip record is

    sum_k P(k | x_i) * sum_alpha f(alpha) * delta * prod_n sum_m d_nm * pi_nm(k, alpha)

where ``d_nm`` is the tap-out density of trip ``n`` on path ``m``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_FLOOR = math.log(1e-300)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

AFC_COLUMNS = ("passenger_id", "trip_idx", "origin", "destination", "tapin_s", "tapout_s")


class ModelError(ValueError):
    """Inconsistent model specification, parameters or data."""


@dataclass(frozen=True)
class AfcTrip:
    passenger_id: str
    trip_idx: int
    origin: str
    destination: str
    t_in: int
    t_out: int

    def __post_init__(self):
        if not self.t_out > self.t_in:
            raise ModelError(f"trip {self.passenger_id}/{self.trip_idx}: tap-out must follow tap-in")


@dataclass(frozen=True)
class PassengerProfile:
    passenger_id: str
    features: Mapping[str, float]


def read_afc(path: str | FsPath) -> list[AfcTrip]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != AFC_COLUMNS:
            raise ModelError(f"AFC header must be {','.join(AFC_COLUMNS)}")
        return [AfcTrip(r["passenger_id"], int(r["trip_idx"]), r["origin"], r["destination"],
                        int(r["tapin_s"]), int(r["tapout_s"])) for r in reader]


def write_afc(trips: Sequence[AfcTrip], path: str | FsPath) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AFC_COLUMNS)
        for t in trips:
            w.writerow([t.passenger_id, t.trip_idx, t.origin, t.destination, t.t_in, t.t_out])


def read_profiles(path: str | FsPath) -> dict[str, PassengerProfile]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = list(reader.fieldnames or ())
        if not names or names[0] != "passenger_id":
            raise ModelError("profile file must start with a passenger_id column")
        return {r["passenger_id"]: PassengerProfile(r["passenger_id"], {k: float(r[k]) for k in names[1:]})
                for r in reader}


def write_profiles(profiles: Sequence[PassengerProfile], features: Sequence[str],
                   path: str | FsPath) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["passenger_id", *features])
        for p in profiles:
            w.writerow([p.passenger_id, *(repr(float(p.features[f])) for f in features)])


@dataclass(frozen=True)
class IntegrationGrid:
    """Midpoint rule on ``[lower, upper]`` with step ``step``."""

    lower: float = -3.0
    upper: float = 3.0
    step: float = 1.0

    def __post_init__(self):
        if not (self.lower < self.upper and self.step > 0):
            raise ModelError("integration grid needs lower < upper and step > 0")
        n = (self.upper - self.lower) / self.step
        if abs(n - round(n)) > 1e-9:
            raise ModelError("grid step must divide the integration range")

    @property
    def midpoints(self) -> np.ndarray:
        n = int(round((self.upper - self.lower) / self.step))
        return self.lower + self.step * (np.arange(n) + 0.5)

    def log_weights(self, sigma: float) -> np.ndarray:
        """``log(f(alpha) * step)`` for a centred normal with sd ``sigma``."""
        a = self.midpoints
        return -0.5 * (a / sigma) ** 2 - math.log(sigma) - _LOG_SQRT_2PI + math.log(self.step)


@dataclass(frozen=True)
class ParamVector:
    """Natural-scale parameters.

    ``theta`` is ``(K, P)`` with the base-class row fixed at zero, ``beta`` is
    ``(K, A)`` and ``sigma`` is ``(K,)``.
    """

    theta: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Which classes, attributes and sharing constraints define the model.

    ``shared`` attributes get one coefficient for all classes. ``panel``
    selects where the panel term enters utilities: ``"all"`` adds it to every
    alternative (where it cancels inside each choice set) and
    ``"designated"`` adds it only to paths flagged ``panel=True``.
    ``label_order`` names an attribute whose coefficients are sorted in
    descending order across classes after estimation, which removes the
    label-switching symmetry of the mixture.
    """

    classes: tuple[str, ...] = ("TS", "CA")
    attributes: tuple[str, ...] = ("ivt", "ovt", "transfers", "dwt", "log_ps")
    class_features: tuple[str, ...] = ("x1", "x2")
    base_class: str | None = None
    shared: frozenset[str] = frozenset({"ivt", "log_ps"})
    class_constant: bool = False
    sigma_shared: bool = True
    panel: str = "designated"
    grid: IntegrationGrid = field(default_factory=IntegrationGrid)
    label_order: str | None = "ovt"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "class_features", tuple(self.class_features))
        object.__setattr__(self, "shared", frozenset(self.shared))
        if self.base_class is None:
            object.__setattr__(self, "base_class", self.classes[-1])
        if self.base_class not in self.classes:
            raise ModelError(f"base class {self.base_class!r} is not one of {self.classes}")
        if not set(self.shared) <= set(self.attributes):
            raise ModelError("shared attributes must be model attributes")
        if self.panel not in ("all", "designated"):
            raise ModelError(f"unknown panel attachment {self.panel!r}")
        if self.label_order is not None and self.label_order not in self.attributes:
            raise ModelError("label_order must name a model attribute")
        self._build_index()

    # -- free-parameter layout -------------------------------------------
    def _build_index(self):
        K, A, P = self.n_classes, len(self.attributes), len(self.membership_features)
        names: list[str] = []
        theta_idx = -np.ones((K, P), dtype=int)
        for k, c in enumerate(self.classes):
            if c == self.base_class:
                continue
            for p, f in enumerate(self.membership_features):
                theta_idx[k, p] = len(names)
                names.append(f"theta[{c}:{f}]")
        beta_idx = np.zeros((K, A), dtype=int)
        for a, attr in enumerate(self.attributes):
            if attr in self.shared or K == 1:
                beta_idx[:, a] = len(names)
                names.append(f"beta[{attr}]")
            else:
                for k, c in enumerate(self.classes):
                    beta_idx[k, a] = len(names)
                    names.append(f"beta[{c}:{attr}]")
        sigma_idx = np.zeros(K, dtype=int)
        if self.sigma_shared or K == 1:
            sigma_idx[:] = len(names)
            names.append("log_sigma")
        else:
            for k, c in enumerate(self.classes):
                sigma_idx[k] = len(names)
                names.append(f"log_sigma[{c}]")
        object.__setattr__(self, "_names", tuple(names))
        object.__setattr__(self, "_theta_idx", theta_idx)
        object.__setattr__(self, "_beta_idx", beta_idx)
        object.__setattr__(self, "_sigma_idx", sigma_idx)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def membership_features(self) -> tuple[str, ...]:
        return (("asc",) if self.class_constant else ()) + self.class_features

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def n_free(self) -> int:
        return len(self._names)

    @property
    def base_index(self) -> int:
        return self.classes.index(self.base_class)

    def log_sigma_mask(self) -> np.ndarray:
        return np.array([n.startswith("log_sigma") for n in self.names])

    def unpack(self, x: np.ndarray) -> ParamVector:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_free,):
            raise ModelError(f"expected {self.n_free} free parameters, got {x.shape}")
        theta = np.where(self._theta_idx >= 0, x[np.clip(self._theta_idx, 0, None)], 0.0)
        return ParamVector(theta, x[self._beta_idx], np.exp(x[self._sigma_idx]))

    def pack(self, params: ParamVector) -> np.ndarray:
        x = np.zeros(self.n_free)
        theta = np.asarray(params.theta, dtype=float)
        beta = np.asarray(params.beta, dtype=float)
        sigma = np.asarray(params.sigma, dtype=float)
        if np.any(theta[self.base_index] != 0):
            raise ModelError("base-class membership coefficients must be zero")
        mask = self._theta_idx >= 0
        x[self._theta_idx[mask]] = theta[mask]
        x[self._beta_idx.ravel()] = beta.ravel()
        if np.any(sigma <= 0):
            raise ModelError("panel standard deviations must be positive")
        x[self._sigma_idx] = np.log(sigma)
        if not np.allclose(self.unpack(x).beta, beta) or not np.allclose(self.unpack(x).sigma, sigma):
            raise ModelError("parameters violate the sharing constraints of the spec")
        return x

    def from_named(self, values: Mapping[str, float]) -> np.ndarray:
        """Free vector from a ``{name: value}`` map; ``sigma`` entries are on the natural scale."""
        x = np.zeros(self.n_free)
        for i, n in enumerate(self.names):
            if n.startswith("log_sigma"):
                key = n.replace("log_sigma", "sigma")
                x[i] = math.log(values[key]) if key in values else 0.0
            else:
                x[i] = values[n]
        return x

    def relabel(self, x: np.ndarray, order: Sequence[int]) -> np.ndarray:
        """Free vector describing the same model with classes permuted.

        New class ``j`` takes the coefficients of old class ``order[j]``;
        membership scores are re-referenced so the base slot stays at zero.
        """
        p = self.unpack(x)
        order = list(order)
        theta = p.theta[order]
        theta = theta - theta[self.base_index]
        return self.pack(ParamVector(theta, p.beta[order], p.sigma[order]))

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "attributes": list(self.attributes),
            "class_features": list(self.class_features),
            "base_class": self.base_class,
            "shared": sorted(self.shared),
            "class_constant": self.class_constant,
            "sigma_shared": self.sigma_shared,
            "panel": self.panel,
            "grid": [self.grid.lower, self.grid.upper, self.grid.step],
            "label_order": self.label_order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        kw = dict(d)
        if "grid" in kw:
            kw["grid"] = IntegrationGrid(*kw["grid"])
        if "shared" in kw:
            kw["shared"] = frozenset(kw["shared"])
        return cls(**kw)

    def baseline(self) -> "ModelSpec":
        """Single-class counterpart with the same attributes and grid."""
        return ModelSpec(classes=("all",), attributes=self.attributes, class_features=(),
                         shared=frozenset(), sigma_shared=True, panel=self.panel,
                         grid=self.grid, label_order=None)


# -- single-passenger building blocks -------------------------------------------

def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def class_probability(x: Sequence[float], theta: np.ndarray) -> np.ndarray:
    """Membership probabilities ``softmax(theta @ x)``; rows of ``theta`` are classes."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    x = np.asarray(x, dtype=float)
    if theta.shape[1] != x.shape[0]:
        raise ModelError(f"membership features have length {x.shape[0]}, coefficients expect {theta.shape[1]}")
    return _softmax(theta @ x)


def choice_probability(z: np.ndarray, beta: Sequence[float], alpha: float = 0.0,
                       attach: Sequence[float] | None = None) -> np.ndarray:
    """Logit probabilities over the paths of one choice set.

    ``z`` is ``(M, A)``. ``alpha`` is added to every utility, or only where
    ``attach`` is 1 when an attachment mask is given.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    v = z @ np.asarray(beta, dtype=float)
    v = v + alpha * (np.ones(len(v)) if attach is None else np.asarray(attach, dtype=float))
    if not np.all(np.isfinite(v)):
        raise ModelError("non-finite path utility")
    return _softmax(v)


def trip_record_likelihood(densities: Sequence[np.ndarray], zs: Sequence[np.ndarray],
                           beta: Sequence[float], alpha: float,
                           attaches: Sequence[np.ndarray] | None = None) -> float:
    """``prod_n sum_m d_nm * pi_nm`` for one passenger, one class and one panel draw."""
    out = 1.0
    for n, (d, z) in enumerate(zip(densities, zs)):
        att = None if attaches is None else attaches[n]
        out *= float(np.dot(np.asarray(d, dtype=float), choice_probability(z, beta, alpha, att)))
    return out


def passenger_likelihood(x: Sequence[float], densities: Sequence[np.ndarray], zs: Sequence[np.ndarray],
                         params: ParamVector, grid: IntegrationGrid,
                         attaches: Sequence[np.ndarray] | None = None) -> float:
    """Probability of one passenger's trip record, panel term integrated on ``grid``."""
    cp = class_probability(x, params.theta)
    total = 0.0
    for k in range(len(cp)):
        w = np.exp(grid.log_weights(params.sigma[k]))
        inner = sum(wa * trip_record_likelihood(densities, zs, params.beta[k], a, attaches)
                    for a, wa in zip(grid.midpoints, w))
        total += cp[k] * inner
    return float(total)


# -- vectorised data and likelihood -------------------------------------------

@dataclass
class ChoiceData:
    """Trips grouped by passenger, padded to the widest choice set.

    ``Z`` is ``(n_trips, M, A)``, ``log_dens``/``avail``/``attach`` are
    ``(n_trips, M)``, ``X`` is ``(n_pax, P)`` and ``starts`` gives the first
    trip row of each passenger.
    """

    passenger_ids: list[str]
    starts: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    avail: np.ndarray
    log_dens: np.ndarray
    attach: np.ndarray

    @property
    def n_trips(self) -> int:
        return self.Z.shape[0]

    @property
    def n_passengers(self) -> int:
        return len(self.passenger_ids)

    @classmethod
    def build(cls, trips: Sequence[AfcTrip], profiles: Mapping[str, PassengerProfile],
              choice_sets: Mapping, densities: np.ndarray, spec: ModelSpec,
              trip_attributes: Callable[[AfcTrip, object], Mapping[str, float]] | None = None
              ) -> "ChoiceData":
        """Assemble arrays from trips, profiles, choice sets and tap-out densities.

        ``densities`` is aligned with ``trips``. ``trip_attributes(trip, path)``,
        if given, returns attribute values that override the path's static
        ones for that trip.
        """
        order = sorted(range(len(trips)), key=lambda i: (trips[i].passenger_id, trips[i].trip_idx))
        densities = np.asarray(densities, dtype=float)
        M = densities.shape[1]
        A = len(spec.attributes)
        n = len(trips)
        Z = np.zeros((n, M, A))
        avail = np.zeros((n, M), dtype=bool)
        attach = np.zeros((n, M))
        dens = np.zeros((n, M))
        pids: list[str] = []
        starts: list[int] = []
        for row, i in enumerate(order):
            t = trips[i]
            if not pids or pids[-1] != t.passenger_id:
                pids.append(t.passenger_id)
                starts.append(row)
            cs = choice_sets[(t.origin, t.destination)]
            for m, p in enumerate(cs.paths):
                attrs = p.attributes
                if trip_attributes is not None:
                    attrs = {**attrs, **trip_attributes(t, p)}
                try:
                    Z[row, m] = [attrs[a] for a in spec.attributes]
                except KeyError as e:
                    raise ModelError(f"path {p.id} lacks attribute {e.args[0]}") from None
                avail[row, m] = True
                attach[row, m] = 1.0 if (spec.panel == "all" or p.panel) else 0.0
                dens[row, m] = densities[i, m]
        feats = spec.membership_features
        X = np.zeros((len(pids), len(feats)))
        for r, pid in enumerate(pids):
            for c, f in enumerate(feats):
                X[r, c] = 1.0 if f == "asc" else profiles[pid].features[f]
        with np.errstate(divide="ignore"):
            log_dens = np.where(avail & (dens > 0), np.log(np.where(dens > 0, dens, 1.0)), -np.inf)
        return cls(pids, np.asarray(starts), X, Z, avail, log_dens, attach)

    def subset(self, passengers: Sequence[int]) -> "ChoiceData":
        """Data restricted to the given passenger rows, in the given order."""
        ends = np.append(self.starts[1:], self.n_trips)
        rows = np.concatenate([np.arange(self.starts[p], ends[p]) for p in passengers])
        lens = ends[list(passengers)] - self.starts[list(passengers)]
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
        return ChoiceData([self.passenger_ids[p] for p in passengers], starts, self.X[list(passengers)],
                          self.Z[rows], self.avail[rows], self.log_dens[rows], self.attach[rows])

    def replicate(self, times: int) -> "ChoiceData":
        idx = list(range(self.n_passengers)) * times
        out = self.subset(idx)
        out.passenger_ids = [f"{pid}#{r}" for r in range(times) for pid in self.passenger_ids]
        return out


class LikelihoodModel:
    """Log-likelihood of a :class:`ChoiceData` set under a :class:`ModelSpec`."""

    def __init__(self, data: ChoiceData, spec: ModelSpec):
        self.data = data
        self.spec = spec
        if data.X.shape[1] != len(spec.membership_features):
            raise ModelError("data was built for a different membership specification")
        self.alphas = spec.grid.midpoints
        self.n_floored = 0

    def _terms(self, x: np.ndarray):
        d, spec = self.data, self.spec
        p = spec.unpack(x)
        K, G = spec.n_classes, len(self.alphas)
        scores = d.X @ p.theta.T  # (n_pax, K)
        log_cp = scores - logsumexp(scores, axis=1, keepdims=True)
        base_v = np.einsum("nma,ka->knm", d.Z, p.beta)  # (K, n, M)
        v = base_v[:, None] + self.alphas[None, :, None, None] * d.attach[None, None]
        v = np.where(d.avail[None, None], v, -np.inf)
        log_pi = v - logsumexp(v, axis=3, keepdims=True)  # (K, G, n, M)
        joint = d.log_dens[None, None] + log_pi
        lt = logsumexp(joint, axis=3)  # (K, G, n)
        floored = ~np.isfinite(lt)
        lt = np.where(floored, LOG_FLOOR, lt)
        S = np.add.reduceat(lt, d.starts, axis=2)  # (K, G, n_pax)
        log_w = np.stack([spec.grid.log_weights(s) for s in p.sigma])  # (K, G)
        T = log_cp.T[:, None, :] + log_w[:, :, None] + S
        log_L = logsumexp(T.reshape(K * G, -1), axis=0)
        return p, log_cp, log_pi, joint, lt, floored, T, log_L

    def per_passenger(self, x: np.ndarray) -> np.ndarray:
        return self._terms(x)[-1]

    def loglike(self, x: np.ndarray) -> float:
        log_L = self.per_passenger(x)
        return float(np.sum(log_L))

    def loglike_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        d, spec = self.data, self.spec
        p, log_cp, log_pi, joint, lt, floored, T, log_L = self._terms(x)
        self.n_floored = int(np.count_nonzero(floored))
        K = spec.n_classes
        grad = np.zeros(spec.n_free)
        r = np.exp(T - log_L[None, None, :])  # posterior over (class, grid point)
        R = r.sum(axis=1)  # (K, n_pax)
        cp = np.exp(log_cp)  # (n_pax, K)

        for k in range(K):
            idx = spec._theta_idx[k]
            if idx.size and idx[0] >= 0:
                np.add.at(grad, idx, (R[k] - cp[:, k]) @ d.X)

        a2 = self.alphas ** 2
        for k in range(K):
            grad[spec._sigma_idx[k]] += np.sum(r[k] * (a2[:, None] / p.sigma[k] ** 2 - 1.0))

        pi = np.exp(log_pi)
        q = np.exp(joint - lt[..., None])
        q = np.where(floored[..., None], pi, q)  # floored trips carry no gradient
        trip_pax = np.repeat(np.arange(d.n_passengers), np.diff(np.append(d.starts, d.n_trips)))
        w_trip = r[:, :, trip_pax]  # (K, G, n)
        for k in range(K):
            diff = (q[k] - pi[k]) * w_trip[k][..., None]  # (G, n, M)
            gk = np.einsum("gnm,nma->a", diff, d.Z)
            np.add.at(grad, spec._beta_idx[k], gk)
        return float(np.sum(log_L)), grad


def log_likelihood(data: ChoiceData, spec: ModelSpec, x: np.ndarray) -> float:
    return LikelihoodModel(data, spec).loglike(x)
