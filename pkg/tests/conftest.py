import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def kinetics():
    from gecnn.skeleton import resolve_topology
    return resolve_topology("kinetics18")


@pytest.fixture(scope="session")
def ntu():
    from gecnn.skeleton import resolve_topology
    return resolve_topology("ntu25")


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)
