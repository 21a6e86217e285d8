import numpy as np
import pytest

from sicure.data import CureDataset


@pytest.fixture
def small_ds():
    """Six subjects covering all three censoring types."""
    left = [0.0, 0.0, 0.4, 1.1, 0.7, 1.5]
    right = [0.5, 1.2, 0.9, 2.0, np.inf, np.inf]
    X = [[0.1, -1.0], [0.5, 0.2], [-0.3, 0.8], [1.2, 0.0], [0.0, 0.4], [-0.9, -0.2]]
    Z = [[0.3], [-0.5], [1.0], [0.0], [0.2], [-1.1]]
    return CureDataset.from_arrays(left, right, X, Z)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
