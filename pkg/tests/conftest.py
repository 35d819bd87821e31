import numpy as np
import pytest

from subtune.datakit import Dataset
from subtune.model import build_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    net = build_network(6, 3, 4, seed=7)
    net.mark_pretrained()
    return net


@pytest.fixture
def blobs():
    """Four well separated Gaussian blobs in 6 dims, 80 samples."""
    r = np.random.default_rng(5)
    centers = 3.0 * np.eye(4, 6)
    y = np.arange(80) % 4
    x = centers[y] + 0.3 * r.normal(size=(80, 6))
    return Dataset(x, y, 4, "blobs")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
