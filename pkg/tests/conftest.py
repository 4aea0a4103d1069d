import warnings

import numpy as np
import pytest

from betamix import FitConfig, ModelSpec, fit
from betamix.simulate import SimConfig, simulate

warnings.filterwarnings("ignore", message="The TBB threading layer")


@pytest.fixture(scope="session")
def sim_small():
    """A 2,000-site paired dataset with the default generating shapes."""
    return simulate(SimConfig(C=2000, seed=11))


@pytest.fixture(scope="session")
def sim_full():
    return simulate(SimConfig(C=20_000, seed=1000))


@pytest.fixture(scope="session")
def kdd_fit_full(sim_full):
    return fit(sim_full.matrix.select_sample(0), ModelSpec("k..", 3), FitConfig(seed=0))


@pytest.fixture(scope="session")
def kdd_fit_small(sim_small):
    return fit(sim_small.matrix.select_sample(0), ModelSpec("k..", 3), FitConfig(seed=0))


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
