"""Re-estimate under a wrongly assumed left-behind profile and show which coefficients move.

    python demos/crowding_sensitivity.py --passengers 1000
"""

import argparse
import tempfile

from railchoice.cli import Dataset, crowding_scenarios, fit_dataset
from railchoice.estimator import OptimizerSettings
from railchoice.simulator import SimulationConfig, simulate, synthetic_spec


def run(passengers: int, seed: int) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        simulate(SimulationConfig(n_passengers=passengers, seed=seed)).write(tmp)
        ds = Dataset.load(tmp)
        spec = synthetic_spec()
        fits = {name: fit_dataset(ds, spec, lb, ds.walk, OptimizerSettings(), hessian=False)[0].named()
                for name, lb in crowding_scenarios(ds.leftbehind(None), {}).items()}
    print(f"{'parameter':<22}{'actual':>10}{'less':>16}{'more':>16}")
    for name, ref in fits["actual"].items():
        cells = "".join(f"{fits[s][name]:>9.3f} ({100 * (fits[s][name] - ref) / abs(ref):+4.0f}%)"
                        for s in ("less", "more"))
        print(f"{name:<22}{ref:>10.3f}{cells}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--passengers", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    run(a.passengers, a.seed)
