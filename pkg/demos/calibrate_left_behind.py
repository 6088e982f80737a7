"""Recover left-behind probabilities on the crowded platform from tap records.

Single-line trips are reduced to journey times measured from a known train
departure, a constrained Gaussian mixture is fitted to them, and the mixture
weights are read off as the probabilities of being left behind 0, 1 or 2 times.

    python demos/calibrate_left_behind.py --trips 10000
"""

import argparse

from railchoice.leftbehind_gmm import calibrate_profile
from railchoice.simulator import CROWDED, SimulationConfig, simulate


def run(trips: int, seed: int) -> None:
    sim = simulate(SimulationConfig(n_passengers=1, calibration_journeys=trips, seed=seed))
    print(f"{len(sim.journeys)} of {trips} trips have an unambiguous first train")
    _, fits = calibrate_profile(sim.journeys, sim.network, sim.walk, 2, sim.config.headway_s)
    truth = CROWDED[("C", "red", "up")]
    for f in fits:
        print(f"platform {'/'.join(f.platform)} from {f.fit.n} journeys")
        for k, (w, m, s) in enumerate(zip(f.fit.weights, f.fit.means, f.fit.sds)):
            print(f"  left behind {k}x: weight {w:.3f} (true {truth[k]:.1f}), mean {m:.0f} s, sd {s:.0f} s")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trips", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    run(a.trips, a.seed)
