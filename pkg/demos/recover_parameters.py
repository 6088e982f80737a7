"""Simulate a dataset, estimate the two-class model and compare with the truth.

    python demos/recover_parameters.py --passengers 1000
"""

import argparse
import tempfile

from railchoice.cli import Dataset, fit_dataset
from railchoice.estimator import OptimizerSettings, likelihood_ratio_test
from railchoice.simulator import SimulationConfig, simulate, synthetic_spec


def run(passengers: int, seed: int) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        simulate(SimulationConfig(n_passengers=passengers, seed=seed)).write(tmp)
        ds = Dataset.load(tmp)
        lb = ds.leftbehind(None)
        spec = synthetic_spec()
        full, _ = fit_dataset(ds, spec, lb, ds.walk, OptimizerSettings())
        base, _ = fit_dataset(ds, spec.baseline(), lb, ds.walk, OptimizerSettings(), hessian=False)
        print(full.table(ds.truth_params()))
        stat, p = likelihood_ratio_test(base.loglik, full.loglik, spec.n_free - base.spec.n_free)
        print(f"single-class LL: {base.loglik:.2f}  LR statistic: {stat:.2f}  p: {p:.3g}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--passengers", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    run(a.passengers, a.seed)
