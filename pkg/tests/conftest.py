import numpy as np
import pytest
from hypothesis import settings

from rsbm.environment import EnvironmentSpec, sample_environment
from rsbm.lattice import Field, LatticeBox

settings.register_profile("rsbm", max_examples=40, deadline=None)
settings.load_profile("rsbm")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict = {}


def gaussian(box, width=1.0):
    return Field.from_function(box, lambda *x: np.exp(-sum(c**2 for c in x) / width**2))


@pytest.fixture
def box1():
    return LatticeBox(1, 4, 4)


@pytest.fixture
def env1(box1):
    return sample_environment(EnvironmentSpec("rademacher", box1, 7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
