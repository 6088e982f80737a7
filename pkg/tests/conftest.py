import sys

import numpy as np
import pytest

from railchoice.simulator import SimulationConfig, simulate


@pytest.fixture(scope="session")
def small_sim():
    """A quick synthetic dataset: 150 passengers, 3 trips each, 2,000 calibration journeys."""
    return simulate(SimulationConfig(n_passengers=150, calibration_journeys=2000, seed=11))


@pytest.fixture(scope="session")
def small_dataset_dir(small_sim, tmp_path_factory):
    out = tmp_path_factory.mktemp("small_data")
    small_sim.write(out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
