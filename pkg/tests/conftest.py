import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel(a, b):
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b.ravel())
    return np.linalg.norm((np.asarray(a) - b).ravel()) / (nb if nb else 1.0)


# one line per acceptance criterion, filled by test_acceptance.verdict
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
