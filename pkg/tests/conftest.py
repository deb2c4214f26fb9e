import numpy as np
import pytest

from lesa.tensor import set_finite_checks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _finite_checks_on():
    prev = set_finite_checks(True)
    yield
    set_finite_checks(prev)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
