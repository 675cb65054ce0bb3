import numpy as np
import pytest

from datacomb.data import MergedSample
from datacomb.simulation import DgpConfig, generate, scenario_config


def toy_sample(n1=40, n0=30, p=2, seed=0, shift=0.5):
    """Small merged sample with a linear X|U relation and Y on primary rows."""
    rng = np.random.default_rng(seed)
    u1 = rng.normal(shift, 1.0, size=(n1, p))
    u0 = rng.normal(0.0, 1.0, size=(n0, p))
    u = np.vstack([u1, u0])
    x = np.r_[np.full(n1, np.nan), u0 @ np.arange(1, p + 1) + rng.normal(size=n0)]
    y = np.r_[u1.sum(axis=1) + rng.normal(size=n1), np.full(n0, np.nan)]
    t = np.r_[np.ones(n1), np.zeros(n0)]
    names = tuple("u%d" % j for j in range(p))
    return MergedSample(t, u, x, y, names, ("x",), ("y",))


@pytest.fixture
def toy():
    return toy_sample()


@pytest.fixture(scope="session")
def sim_sample():
    """One draw of the default two-sample IV design (n1=5000, n0=500)."""
    return generate(scenario_config("table1", seed=11), 0)


@pytest.fixture(scope="session")
def small_sim():
    return generate(DgpConfig(n1=600, n0=300, seed=5), 0)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
