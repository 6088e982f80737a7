"""Maximum-likelihood estimation, numerical Hessians and inference."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import minimize

from .latent_choice import ChoiceData, LikelihoodModel, ModelSpec


class EstimationError(RuntimeError):
    """Estimation could not start or produced unusable output."""


class HessianError(EstimationError):
    """Stencil evaluations stayed non-finite after shrinking the step."""


@dataclass(frozen=True)
class OptimizerSettings:
    gtol: float = 1e-6
    max_iter: int = 500

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerSettings":
        return cls(**{k: d[k] for k in ("gtol", "max_iter") if k in d})


@dataclass
class EstimationResult:
    """Estimates with inference on the natural scale (``sigma`` rather than ``log_sigma``)."""

    spec: ModelSpec
    x: np.ndarray
    loglik: float
    loglik_null: float | None
    iterations: int
    converged: bool
    message: str
    std_err: np.ndarray | None = None
    t_values: np.ndarray | None = None
    hessian: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [n.replace("log_sigma", "sigma") for n in self.spec.names]

    @property
    def estimates(self) -> np.ndarray:
        """Free parameters with log-sigma entries mapped back to sigma."""
        out = np.array(self.x, dtype=float)
        mask = self.spec.log_sigma_mask()
        out[mask] = np.exp(out[mask])
        return out

    def named(self) -> dict[str, float]:
        return dict(zip(self.names, self.estimates.tolist()))

    def to_dict(self, truth: Mapping[str, float] | None = None) -> dict:
        rows = []
        for i, name in enumerate(self.names):
            row = {"name": name, "estimate": float(self.estimates[i])}
            if self.std_err is not None:
                se, t = self.std_err[i], self.t_values[i]
                row["std_err"] = None if not np.isfinite(se) else float(se)
                row["t_value"] = None if not np.isfinite(t) else float(t)
            if truth is not None and name in truth:
                row["truth"] = float(truth[name])
                row["rel_error"] = relative_error(self.estimates[i], truth[name])
            rows.append(row)
        return {
            "spec": self.spec.to_dict(),
            "parameters": rows,
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, truth: Mapping[str, float] | None = None) -> str:
        return json.dumps(self.to_dict(truth), indent=2, sort_keys=True)

    def table(self, truth: Mapping[str, float] | None = None) -> str:
        """Plain-text table: estimate, relative error against ``truth`` if given, t-value."""
        lines = [f"{'parameter':<24}{'estimate':>12}{'(error)':>11}{'t-value':>10}"]
        for i, name in enumerate(self.names):
            est = self.estimates[i]
            err = ""
            if truth is not None and name in truth:
                err = f"({100 * relative_error(est, truth[name]):+.1f}%)"
            t = "" if self.t_values is None or not np.isfinite(self.t_values[i]) else f"{self.t_values[i]:.2f}"
            lines.append(f"{name:<24}{est:>12.4f}{err:>11}{t:>10}")
        lines.append(f"LL*: {self.loglik:.2f}")
        if self.loglik_null is not None:
            lines.append(f"LL0: {self.loglik_null:.2f}")
        lines.append(f"iterations: {self.iterations}  converged: {self.converged}")
        return "\n".join(lines)


def relative_error(estimate: float, truth: float) -> float:
    return float((estimate - truth) / abs(truth)) if truth != 0 else float(estimate)


# -- optimisation -----------------------------------------------------------------

def _ovt_order(spec: ModelSpec, x: np.ndarray) -> list[int] | None:
    """Class order that sorts classes by their out-of-vehicle coefficient, least negative first."""
    if spec.n_classes < 2 or not spec.label_order:
        return None
    try:
        a = spec.attributes.index(spec.label_order)
    except ValueError:
        return None
    coef = spec.unpack(x).beta[:, a]
    return sorted(range(spec.n_classes), key=lambda k: -coef[k])


def canonical_labels(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Relabel classes so the likelihood optimum has a unique representation.

    Class labels are exchangeable, so any permutation of the class blocks
    reaches the same likelihood. Classes are ordered by the coefficient named
    in ``spec.label_order`` (descending), then membership scores are
    re-referenced to the base class.
    """
    order = _ovt_order(spec, x)
    if order is None or order == list(range(spec.n_classes)):
        return np.asarray(x, dtype=float)
    return spec.relabel(x, order)


def minimize_bfgs(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
                  settings: OptimizerSettings = OptimizerSettings()):
    """BFGS on ``f`` (value and gradient), keeping the best iterate seen.

    The initial inverse Hessian is scaled so the first trial step has length at
    most one. An unscaled first step from a poor start can land where the logit
    probabilities saturate and the gradient underflows to zero.
    """
    best = {"x": np.array(x0, dtype=float), "f": math.inf}
    _, g0 = f(np.asarray(x0, dtype=float))
    h0 = np.eye(len(x0)) / max(1.0, float(np.linalg.norm(g0)))

    def wrapped(x):
        v, g = f(x)
        if np.isfinite(v) and v < best["f"]:
            best["x"], best["f"] = np.array(x), v
        return v, g

    res = minimize(wrapped, x0, jac=True, method="BFGS",
                   options={"gtol": settings.gtol, "maxiter": settings.max_iter, "hess_inv0": h0})
    x = res.x if res.fun <= best["f"] else best["x"]
    return x, min(res.fun, best["f"]), res


def default_start(spec: ModelSpec, offset: float = 0.1) -> np.ndarray:
    """Zeros, except class-specific coefficients of class ``k`` start at ``-offset * k``.

    An all-zero start is a symmetric stationary point of the latent-class
    likelihood: identical classes receive identical gradients and never separate.
    """
    x = np.zeros(spec.n_free)
    idx = spec._beta_idx
    for k in range(1, spec.n_classes):
        own = idx[k] != idx[0]
        x[idx[k][own]] = -offset * k
    return x


def maximize(data: ChoiceData, spec: ModelSpec, x0: np.ndarray | None = None,
             settings: OptimizerSettings = OptimizerSettings(), null: bool = True,
             model: LikelihoodModel | None = None) -> EstimationResult:
    """Quasi-Newton ascent of the log-likelihood from ``x0`` (``default_start`` if omitted).

    The analytic gradient drives BFGS. The result keeps the best iterate and is
    relabelled to the canonical class order.
    """
    model = model or LikelihoodModel(data, spec)
    x0 = default_start(spec) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (spec.n_free,) or not np.all(np.isfinite(x0)):
        raise EstimationError("initial parameters must be a finite vector of the right length")
    ll0 = model.loglike(x0)
    if not np.isfinite(ll0):
        raise EstimationError("log-likelihood is not finite at the initial parameters")

    # Averaging over passengers keeps the gradient tolerance independent of sample size.
    scale = 1.0 / max(data.n_passengers, 1)

    def negative(x):
        v, g = model.loglike_and_grad(x)
        if not np.isfinite(v):
            return math.inf, np.zeros_like(x)
        return -v * scale, -g * scale

    x, fval, res = minimize_bfgs(negative, x0, settings)
    x = canonical_labels(spec, x)
    ll = model.loglike(x)
    _, grad = model.loglike_and_grad(x)
    gnorm = float(np.max(np.abs(grad))) * scale
    converged = bool(res.success) or gnorm < settings.gtol
    llnull = null_loglik(model, spec) if null else None
    diag = {"grad_inf_norm": gnorm, "loglik_init": ll0, "floored_trips": model.n_floored,
            "function_evals": int(res.nfev)}
    return EstimationResult(spec, x, ll, llnull, int(res.nit), converged, str(res.message), diagnostics=diag)


def null_loglik(model: LikelihoodModel, spec: ModelSpec) -> float:
    """Log-likelihood with every coefficient at zero and sigma at one."""
    return model.loglike(np.zeros(spec.n_free))


def random_starts(n: int, n_free: int, seed: int, low: float = -5.0, high: float = 5.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(low, high, size=(n, n_free))


# -- Hessian and inference --------------------------------------------------------

_D2 = np.array([-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12])
_D2_OFFSETS = np.array([-2, -1, 0, 1, 2])


def default_steps(x: np.ndarray) -> np.ndarray:
    return np.maximum(1e-4, 1e-4 * np.abs(np.asarray(x, dtype=float)))


def numerical_hessian(f: Callable[[np.ndarray], float], x: np.ndarray,
                      steps: np.ndarray | float | None = None, max_shrink: int = 4) -> np.ndarray:
    """Fourth-order finite-difference Hessian of a scalar function.

    Diagonal entries use the five-point stencil; each off-diagonal entry
    combines the one-step and two-step cross differences,
    ``[16 (f11 - f1-1 - f-11 + f-1-1) - (f22 - f2-2 - f-22 + f-2-2)] / (48 hx hy)``.
    If any stencil value is not finite the steps are halved and the whole
    matrix is recomputed, up to ``max_shrink`` times.
    """
    x = np.asarray(x, dtype=float)
    h = default_steps(x) if steps is None else np.broadcast_to(np.asarray(steps, dtype=float), x.shape).copy()
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    for _ in range(max_shrink + 1):
        H = _hessian_once(f, x, h)
        if H is not None:
            return H
        h = h / 2
    raise HessianError("objective not finite at stencil points even after shrinking the step")


def _hessian_once(f, x, h):
    n = len(x)
    f0 = f(x)
    if not np.isfinite(f0):
        raise HessianError("objective is not finite at the expansion point")
    H = np.zeros((n, n))
    E = np.eye(n)
    for i in range(n):
        vals = [f0 if o == 0 else f(x + o * h[i] * E[i]) for o in _D2_OFFSETS]
        if not np.all(np.isfinite(vals)):
            return None
        H[i, i] = float(np.dot(_D2, vals)) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            def g(a, b):
                return f(x + a * h[i] * E[i] + b * h[j] * E[j])
            one = g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1)
            two = g(2, 2) - g(2, -2) - g(-2, 2) + g(-2, -2)
            if not (np.isfinite(one) and np.isfinite(two)):
                return None
            H[i, j] = H[j, i] = (16 * one - two) / (48 * h[i] * h[j])
    return 0.5 * (H + H.T)


def inference(H: np.ndarray, x: np.ndarray, spec: ModelSpec | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
    """Standard errors and t-values from the log-likelihood Hessian.

    ``Var = -diag(H^-1)``. Entries named ``log_sigma*`` in ``spec`` are mapped
    to sigma with the delta method, and their t-value tests sigma = 0. A
    non-positive variance gives NaN for that entry and is listed in the
    diagnostics.
    """
    H = np.asarray(H, dtype=float)
    x = np.asarray(x, dtype=float)
    diag: dict = {}
    eig = np.linalg.eigvalsh(H)
    diag["max_eigenvalue"] = float(eig.max())
    diag["condition"] = float(np.abs(eig).max() / max(np.abs(eig).min(), 1e-300))
    try:
        inv = np.linalg.inv(H)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("Hessian is singular; using the pseudo-inverse", RuntimeWarning, stacklevel=2)
        inv = np.linalg.pinv(H)
        diag["pseudo_inverse"] = True
    var = -np.diag(inv)
    bad = ~(var > 0)
    se = np.where(bad, np.nan, np.sqrt(np.where(bad, 1.0, var)))
    est = x.copy()
    if spec is not None:
        mask = spec.log_sigma_mask()
        est[mask] = np.exp(x[mask])
        se[mask] = est[mask] * se[mask]
    t = np.where(bad, np.nan, est / np.where(bad, 1.0, se))
    if bad.any():
        diag["non_concave"] = [int(i) for i in np.nonzero(bad)[0]]
    return se, t, diag


def attach_inference(result: EstimationResult, model: LikelihoodModel,
                     steps: np.ndarray | float | None = None) -> EstimationResult:
    H = numerical_hessian(model.loglike, result.x, steps)
    se, t, diag = inference(H, result.x, result.spec)
    result.hessian = H
    result.std_err = se
    result.t_values = t
    result.diagnostics.update(diag)
    return result


def likelihood_ratio_test(ll_restricted: float, ll_full: float, df: int) -> tuple[float, float]:
    """Statistic ``-2 (LL_r - LL_f)`` and its chi-square p-value."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    stat = -2.0 * (ll_restricted - ll_full)
    if stat < 0:
        if stat < -1e-6 * max(1.0, abs(ll_full)):
            warnings.warn(f"restricted model fits better by {-stat / 2:.3g} log-likelihood units",
                          RuntimeWarning, stacklevel=2)
        stat = 0.0
    return float(stat), float(stats.chi2.sf(stat, df))


def multistart(data: ChoiceData, spec: ModelSpec, starts: Sequence[np.ndarray],
               settings: OptimizerSettings = OptimizerSettings()) -> list[EstimationResult]:
    model = LikelihoodModel(data, spec)
    return [maximize(data, spec, s, settings, null=False, model=model) for s in starts]


def max_pairwise_spread(xs: Sequence[np.ndarray]) -> float:
    a = np.asarray(xs, dtype=float)
    return float(np.max(a.max(axis=0) - a.min(axis=0)))
