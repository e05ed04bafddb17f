import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from geossl.synthetic import make_surrogate_split  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def natural_images():
    """Small labeled split of structured (non-noise) images."""
    return make_surrogate_split(40, seed=[7, 7])


@pytest.fixture(scope="session")
def natural_image(natural_images):
    return natural_images.images[3]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_images(rng, n, h=32, w=32):
    return rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8)


# One line per acceptance criterion, filled by test_acceptance.py.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
