import numpy as np
import pytest

from pnn.dynamics import LjPotential, SimConfig, generate_dataset
from pnn.forcenet import ExactForce, PretrainConfig, lj_force_samples, pretrain_force_subnet


@pytest.fixture(scope="session")
def pot():
    return LjPotential()


@pytest.fixture(scope="session")
def data(pot):
    return generate_dataset(pot, SimConfig())


@pytest.fixture(scope="session")
def small_data(pot):
    """Short trajectories at the default data timestep; quick to train on."""
    return generate_dataset(pot, SimConfig(total_steps=2000))


@pytest.fixture(scope="session")
def exact(pot):
    return ExactForce(pot)


@pytest.fixture(scope="session")
def subnet(pot):
    x, f = lj_force_samples(pot, 0.98, 1.45)
    return pretrain_force_subnet(x, f, PretrainConfig(epochs=2000))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
