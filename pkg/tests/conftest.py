import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wassrate.measures import DiscreteMeasure  # noqa: E402


def random_measure(rng, n, d, *, spread=1.0, grid=None, uniform=False):
    """Random discrete measure; ``grid`` snaps coordinates to multiples of 1/grid."""
    pts = rng.uniform(-spread, spread, size=(n, d))
    if grid:
        pts = np.round(pts * grid) / grid
    w = np.full(n, 1.0 / n) if uniform else rng.dirichlet(np.ones(n))
    return DiscreteMeasure(pts, w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, appended by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
