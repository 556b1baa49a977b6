import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hjm_fdr.curve_space import MaturityGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid():
    return MaturityGrid()


@pytest.fixture(scope="session")
def sv_grid():
    """Grid whose spacing is 1/16, so dt = dx divides T = 1."""
    return MaturityGrid(15.9375, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
