import numpy as np
import pytest

from nwflow.prior import Priors
from util import make_flow


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def legall3():
    return make_flow(3)


@pytest.fixture(scope="session")
def legall1():
    return make_flow(1)


@pytest.fixture(scope="session")
def priors3():
    return Priors(3)


@pytest.fixture(scope="session")
def priors1():
    return Priors(1)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
