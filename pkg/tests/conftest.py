import numpy as np
import pytest


def batch_se(x, batches=50):
    """Monte Carlo standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, float)
    b = len(x) // batches
    means = x[: b * batches].reshape(batches, b).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(batches))


def philox(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@pytest.fixture
def rng():
    return philox(20240611)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
