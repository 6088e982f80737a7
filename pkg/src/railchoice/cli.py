"""Command-line front end: simulate, calibrate left-behind, estimate, report.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation did not
converge (partial results are still written), 4 file-system errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .estimator import (EstimationError, EstimationResult, OptimizerSettings, attach_inference,
                        likelihood_ratio_test, max_pairwise_spread, maximize, random_starts)
from .latent_choice import (AfcTrip, ChoiceData, LikelihoodModel, ModelSpec, PassengerProfile, read_afc,
                            read_profiles)
from .leftbehind_gmm import (calibrate_profile, read_journeys, reference_journeys, write_journeys)
from .ptam import LeftBehindProfile, tapout_densities
from .simulator import (LESS_CROWDED, MORE_CROWDED, SimulationConfig, simulate, synthetic_spec,
                        trip_attributes)
from .transit_core import ChoiceSet, Network, Timetable, choice_sets_from_dict, load_json, save_json
from .walktime import WalkModel

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4

log = logging.getLogger("railchoice")

CONFIG_SECTIONS = ("simulation", "model", "optimizer", "calibration", "report")
SPEED_FACTORS = (0.8, 1.0, 1.2)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# -- configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    """Settings file contents, one mapping per section; missing sections use defaults."""

    simulation: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | FsPath | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise CliError(f"{path}: top level must be an object")
        unknown = set(data) - set(CONFIG_SECTIONS)
        if unknown:
            raise CliError(f"{path}: unknown sections {', '.join(sorted(unknown))}")
        cfg = cls(**{k: dict(data.get(k, {})) for k in CONFIG_SECTIONS})
        cfg.spec()
        cfg.settings()
        return cfg

    def spec(self) -> ModelSpec:
        if not self.model:
            return synthetic_spec()
        return ModelSpec.from_dict(self.model)

    def settings(self) -> OptimizerSettings:
        unknown = set(self.optimizer) - {"gtol", "max_iter"}
        if unknown:
            raise CliError(f"unknown optimizer settings: {', '.join(sorted(unknown))}")
        return OptimizerSettings.from_dict(self.optimizer)


# -- datasets ---------------------------------------------------------------------

DATASET_FILES = ("dataset.json", "network.json", "walk.json", "paths.json", "timetable.csv", "afc.csv",
                 "profiles.csv")


@dataclass
class Dataset:
    """A simulated or observed dataset directory, validated on load."""

    root: FsPath
    manifest: dict
    network: Network
    walk: WalkModel
    choice_sets: dict[tuple[str, str], ChoiceSet]
    timetable: Timetable
    trips: list[AfcTrip]
    profiles: dict[str, PassengerProfile]
    truth: dict | None

    @classmethod
    def load(cls, root: str | FsPath) -> "Dataset":
        root = FsPath(root)
        missing = [f for f in DATASET_FILES if not (root / f).is_file()]
        if missing:
            raise FileNotFoundError(f"{root}: missing {', '.join(missing)}")
        network = Network.from_dict(load_json(root / "network.json"))
        truth_file = root / "ground_truth.json"
        return cls(root, load_json(root / "dataset.json"), network,
                   WalkModel.from_dict(load_json(root / "walk.json")),
                   choice_sets_from_dict(load_json(root / "paths.json"), network),
                   Timetable.from_csv(root / "timetable.csv", network),
                   read_afc(root / "afc.csv"), read_profiles(root / "profiles.csv"),
                   load_json(truth_file) if truth_file.is_file() else None)

    @property
    def period_s(self) -> int:
        return int(self.manifest.get("profile_period_s", 900))

    def leftbehind(self, path: str | FsPath | None) -> LeftBehindProfile:
        path = self.root / "leftbehind_true.csv" if path is None else FsPath(path)
        return LeftBehindProfile.from_csv(path, self.period_s)

    def truth_params(self) -> dict[str, float] | None:
        return None if self.truth is None else dict(self.truth["params"])

    def check_trips(self) -> None:
        for t in self.trips:
            if (t.origin, t.destination) not in self.choice_sets:
                raise CliError(f"trip {t.passenger_id}/{t.trip_idx}: no choice set for {t.origin}-{t.destination}")
            if t.passenger_id not in self.profiles:
                raise CliError(f"trip {t.passenger_id}/{t.trip_idx}: passenger has no profile")

    def _digest(self, *parts: str) -> str:
        h = hashlib.sha256()
        for name in ("afc.csv", "timetable.csv", "paths.json"):
            h.update((self.root / name).read_bytes())
        for p in parts:
            h.update(p.encode())
        return h.hexdigest()[:24]

    def densities(self, lb: LeftBehindProfile, walk: WalkModel, threads: int,
                  cache_dir: FsPath | None) -> np.ndarray:
        """Tap-out densities, cached on disk under a hash of every input they depend on."""
        lb_key = json.dumps({"period": lb.period_s, "default": lb.default,
                             "cells": sorted([list(k) + [list(v)] for k, v in lb.cells.items()])})
        key = self._digest(lb_key, json.dumps(walk.to_dict(), sort_keys=True))
        target = None if cache_dir is None else cache_dir / f"densities-{key}.npz"
        if target is not None and target.is_file():
            with np.load(target) as z:
                if z["key"].item() == key:
                    log.info("tap-out densities loaded from %s", target)
                    return z["densities"]
        log.info("computing tap-out densities for %d trips", len(self.trips))
        d = tapout_densities(self.trips, self.choice_sets, self.timetable, lb, walk, threads)
        if target is not None:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "wb") as fh:
                np.savez(fh, densities=d, key=np.array(key))
        return d

    def choice_data(self, spec: ModelSpec, densities: np.ndarray) -> ChoiceData:
        overrides = trip_attributes(self.timetable, self.walk, self.manifest.get("ovt_mode", "static"))
        return ChoiceData.build(self.trips, self.profiles, self.choice_sets, densities, spec, overrides)


def fit_dataset(ds: Dataset, spec: ModelSpec, lb: LeftBehindProfile, walk: WalkModel,
                settings: OptimizerSettings, threads: int = 1, cache_dir: FsPath | None = None,
                hessian: bool = True) -> tuple[EstimationResult, LikelihoodModel]:
    """Densities, maximisation and (optionally) Hessian-based inference for one scenario."""
    data = ds.choice_data(spec, ds.densities(lb, walk, threads, cache_dir))
    model = LikelihoodModel(data, spec)
    result = maximize(data, spec, settings=settings, model=model)
    if hessian:
        attach_inference(result, model)
    return result, model


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    sim = dict(cfg.simulation)
    if args.seed is not None:
        sim["seed"] = args.seed
    if args.passengers is not None:
        sim["n_passengers"] = args.passengers
    if args.trips is not None:
        sim["trips_per_passenger"] = args.trips
    config = SimulationConfig.from_dict(sim)
    config.validate()
    result = simulate(config)
    files = result.write(args.out)
    print(f"afc rows: {len(result.trips)}")
    print(f"passengers: {len(result.profiles)}")
    print(f"calibration journeys kept: {len(result.journeys)} of {len(result.calibration_trips)}")
    print(f"written to {FsPath(args.out)} ({len(files)} files)")
    return EXIT_OK


def cmd_calibrate_lb(args, cfg: RunConfig) -> int:
    root = FsPath(args.data)
    manifest = load_json(root / "dataset.json")
    network = Network.from_dict(load_json(root / "network.json"))
    walk = WalkModel.from_dict(load_json(root / "walk.json"))
    period_s = int(manifest.get("profile_period_s", 900))
    opts = dict(cfg.calibration)
    unknown = set(opts) - {"components", "headway_s", "gap_slack", "prior_slack", "pool_periods", "max_iter"}
    if unknown:
        raise CliError(f"unknown calibration settings: {', '.join(sorted(unknown))}")
    C = args.components if args.components is not None else int(opts.get("components", 2))
    headway = args.headway if args.headway is not None else float(opts.get("headway_s", manifest.get("headway_s", 120.0)))
    if args.journeys is not None:
        rows = read_journeys(args.journeys)
    elif (root / "calibration_afc.csv").is_file():
        timetable = Timetable.from_csv(root / "timetable.csv", network)
        rows = reference_journeys(read_afc(root / "calibration_afc.csv"), network, timetable, walk, period_s)
    else:
        rows = read_journeys(root / "journeys.csv")
    if not rows:
        raise CliError("no calibration journeys")
    pool = not args.per_period and bool(opts.get("pool_periods", True))
    profile, fits = calibrate_profile(rows, network, walk, C, headway, period_s, pool,
                                      float(opts.get("gap_slack", 0.25)), opts.get("prior_slack"),
                                      int(opts.get("max_iter", 2000)))
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile.to_csv(out / "leftbehind_calibrated.csv")
    write_journeys(rows, out / "journeys_used.csv")
    save_json({"components": C, "headway_s": headway, "pooled": pool, "cells": [f.to_dict() for f in fits]},
              out / "calibration.json")
    for f in fits:
        w = ", ".join(f"{x:.3f}" for x in f.fit.weights)
        m = ", ".join(f"{x:.1f}" for x in f.fit.means)
        period = "all" if f.period == -1 else f.period
        print(f"{f.od} period {period} platform {'/'.join(f.platform)}: n={f.fit.n} weights=({w}) "
              f"means=({m}) iterations={f.fit.iterations}")
    return EXIT_OK


def _lr_block(full: EstimationResult, base: EstimationResult) -> dict:
    df = full.spec.n_free - base.spec.n_free
    stat, p = likelihood_ratio_test(base.loglik, full.loglik, df)
    return {"loglik_baseline": base.loglik, "chi2": stat, "df": df, "p_value": p}


def cmd_estimate(args, cfg: RunConfig) -> int:
    ds = Dataset.load(args.data)
    ds.check_trips()
    spec = cfg.spec()
    if args.model == "baseline":
        spec = spec.baseline()
    settings = cfg.settings()
    lb = ds.leftbehind(args.leftbehind)
    truth = None if args.no_truth else ds.truth_params()
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache"

    result, model = fit_dataset(ds, spec, lb, ds.walk, settings, args.threads, cache, not args.no_hessian)
    doc = result.to_dict(truth)
    lines = [result.table(truth)]
    if args.model == "latent" and spec.n_classes > 1:
        base_spec = spec.baseline()
        base, _ = fit_dataset(ds, base_spec, lb, ds.walk, settings, args.threads, cache, hessian=False)
        lr = _lr_block(result, base)
        doc["likelihood_ratio"] = lr
        doc["baseline"] = base.to_dict(truth)
        lines.append(f"LL_B: {lr['loglik_baseline']:.2f}")
        lines.append(f"chi2: {lr['chi2']:.2f}  df: {lr['df']}  p: {lr['p_value']:.3g}")

    if args.init_seed_sweep:
        seed = 0 if args.seed is None else args.seed
        starts = random_starts(args.init_seed_sweep, spec.n_free, seed)
        rows, xs, ok = [], [], True
        for i, x0 in enumerate(starts):
            r = maximize(model.data, spec, x0, settings, null=False, model=model)
            xs.append(r.x)
            ok &= r.converged
            for name, a, b in zip(spec.names, x0, r.x):
                rows.append([i, name, repr(float(a)), repr(float(b)), repr(r.loglik), r.converged])
        spread = max_pairwise_spread(xs)
        with open(out / "init_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["start", "parameter", "initial", "estimate", "loglik", "converged"])
            w.writerows(rows)
        doc["init_sweep"] = {"starts": len(starts), "seed": seed, "max_pairwise_spread": spread,
                             "all_converged": ok}
        lines.append(f"init sweep: {len(starts)} starts, max pairwise spread {spread:.3g}, "
                     f"all converged: {ok}")

    (out / "estimate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "estimate.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not result.converged:
        print(f"estimation did not converge: {result.message}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def crowding_scenarios(lb: LeftBehindProfile, report: Mapping) -> dict[str, LeftBehindProfile]:
    """Actual profile plus copies whose crowded cells take the less/more crowding vectors.

    A cell counts as crowded when it gives any probability to being left behind.
    """
    less = tuple(report.get("less_crowded", LESS_CROWDED))
    more = tuple(report.get("more_crowded", MORE_CROWDED))
    out = {"actual": lb}
    for name, vec in (("less", less), ("more", more)):
        cells = {k: (vec if v[0] < 1.0 else v) for k, v in lb.cells.items()}
        out[name] = LeftBehindProfile(cells, lb.period_s, lb.default)
    return out


def _scenario_rows(tag: Sequence, result: EstimationResult, truth: Mapping | None) -> list[list]:
    rows = []
    for name, est in zip(result.names, result.estimates):
        t = None if truth is None else truth.get(name)
        rel = "" if t is None else repr(float((est - t) / abs(t)))
        rows.append([*tag, name, repr(float(est)), "" if t is None else repr(float(t)), rel,
                     repr(result.loglik), result.converged])
    return rows


def cmd_report(args, cfg: RunConfig) -> int:
    ds = Dataset.load(args.data)
    ds.check_trips()
    spec = cfg.spec()
    settings = cfg.settings()
    lb = ds.leftbehind(args.leftbehind)
    truth = None if args.no_truth else ds.truth_params()
    report = dict(cfg.report)
    factors = tuple(report.get("speed_factors", SPEED_FACTORS))
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache"
    tail = ["parameter", "estimate", "truth", "rel_error", "loglik", "converged"]
    converged = True
    if args.sweep in ("speed", "all"):
        rows = []
        for g1 in factors:
            for g2 in factors:
                walk = ds.walk.perturbed(g1, g2)
                r, _ = fit_dataset(ds, spec, lb, walk, settings, args.threads, cache, hessian=False)
                converged &= r.converged
                rows += _scenario_rows([g1, g2], r, truth)
                log.info("speed scenario (%.1f, %.1f): LL %.2f", g1, g2, r.loglik)
        _write_rows(out / "sensitivity_speed.csv", ["gamma_mean", "gamma_sd", *tail], rows)
        print(f"speed sweep: {len(factors) ** 2} scenarios -> {out / 'sensitivity_speed.csv'}")
    if args.sweep in ("crowding", "all"):
        rows = []
        for name, prof in crowding_scenarios(lb, report).items():
            r, _ = fit_dataset(ds, spec, prof, ds.walk, settings, args.threads, cache, hessian=False)
            converged &= r.converged
            rows += _scenario_rows([name], r, truth)
            log.info("crowding scenario %s: LL %.2f", name, r.loglik)
        _write_rows(out / "sensitivity_crowding.csv", ["scenario", *tail], rows)
        print(f"crowding sweep: 3 scenarios -> {out / 'sensitivity_crowding.csv'}")
    return EXIT_OK if converged else EXIT_CONVERGENCE


def _write_rows(path: FsPath, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON settings file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="railchoice", parents=[common],
                                description="Latent-class path choice estimation from tap and train data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--passengers", type=int)
    s.add_argument("--trips", type=int, help="trips per passenger")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate-lb", parents=[common], help="fit left-behind probabilities")
    c.add_argument("--data", required=True, help="dataset directory")
    c.add_argument("--journeys", help="journey-time CSV (default: derived from the dataset)")
    c.add_argument("--components", type=int, help="maximum left-behind count C")
    c.add_argument("--headway", type=float, help="headway in seconds")
    c.add_argument("--per-period", action="store_true", help="fit each period separately")
    c.set_defaults(func=cmd_calibrate_lb)

    e = sub.add_parser("estimate", parents=[common], help="estimate path-choice parameters")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--leftbehind", help="left-behind profile CSV (default: the dataset's true profile)")
    e.add_argument("--model", choices=("latent", "baseline"), default="latent")
    e.add_argument("--init-seed-sweep", type=int, default=0, metavar="N",
                   help="also run N uniform[-5, 5] starts and report their spread")
    e.add_argument("--no-truth", action="store_true", help="ignore ground truth even if present")
    e.add_argument("--no-hessian", action="store_true", help="skip standard errors")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("report", parents=[common], help="sensitivity sweeps as tidy CSV")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--leftbehind", help="left-behind profile CSV (default: the dataset's true profile)")
    r.add_argument("--sweep", choices=("speed", "crowding", "all"), default="all")
    r.add_argument("--no-truth", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("threads", 1), ("out", "."), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        if args.threads < 1:
            raise CliError("--threads must be at least 1")
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
