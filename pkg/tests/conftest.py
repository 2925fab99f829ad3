import numpy as np
import pytest

from icogauge.checks import GEO

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def geo():
    """Callable r -> (grid, atlas, group), built once per resolution."""
    return GEO


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
