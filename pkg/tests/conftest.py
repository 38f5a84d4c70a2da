import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pathflow.geometry import make_manifold  # noqa: E402
from pathflow.wiener import TimeGrid, sample_brownian  # noqa: E402

ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Remember a criterion verdict; echoed in the terminal summary."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sphere2():
    return make_manifold("sphere", 2)


@pytest.fixture(scope="session")
def sphere3():
    return make_manifold("sphere", 3)


@pytest.fixture(scope="session")
def flat2():
    return make_manifold("flat", 2)


@pytest.fixture
def small_batch():
    grid = TimeGrid(64)
    return sample_brownian(grid, 2, seed=5, n_paths=64)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
