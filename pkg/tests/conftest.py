import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("vpdecay", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("vpdecay")

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def maxwellian():
    from vpdecay.equilibria import make_equilibrium
    return make_equilibrium("maxwellian", 3)


@pytest.fixture
def rng():
    return np.random.default_rng(int(os.environ.get("VPDECAY_TEST_SEED", "7")))
