import numpy as np
import pytest

from layerscope.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")
    np.seterr(over="raise", invalid="ignore")


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPT_KEY

    lines = config.stash.get(ACCEPT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
