import numpy as np
import pytest

from plasticity_lab.numerics import RandomStream


@pytest.fixture
def rng():
    return RandomStream(1234, 7)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240531)


# acceptance verdicts, filled by test_acceptance.py and echoed at session end
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
