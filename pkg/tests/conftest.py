import numpy as np
import pytest

from csglab import gmm
from csglab.denoiser import ToyDenoiser, init_weights
from csglab.schedule import make_schedule


@pytest.fixture(scope="session")
def cosine50():
    return make_schedule(50, 0.01, "cosine_alpha")


@pytest.fixture(scope="session")
def gmm_task():
    return gmm.reference_task(0)


@pytest.fixture(scope="session")
def init_toy(cosine50):
    """Untrained network: fine wherever only structure, not quality, matters."""
    return ToyDenoiser(init_weights(3), cosine50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
