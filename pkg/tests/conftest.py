import numpy as np
import pytest

from riskmpc.system import Box, UncertainLinearSystem
from riskmpc.simulator import DCDC_A, DCDC_B


@pytest.fixture
def dcdc_sys():
    return UncertainLinearSystem(np.array(DCDC_A), np.array(DCDC_B), np.eye(2), 0.05, Box.symmetric([0.14, 0.14]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
