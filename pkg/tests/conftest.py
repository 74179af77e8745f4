import os
from pathlib import Path

import numpy as np
import pytest

from sdhfl.data import DATA_ENV, Dataset, mnist_available

_FALLBACK = Path(__file__).resolve().parents[1] / "data" / "mnist"
if DATA_ENV not in os.environ and _FALLBACK.exists():
    os.environ[DATA_ENV] = str(_FALLBACK)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_dataset():
    """10 classes x 60 samples of 8-pixel random images."""
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(10), 60)
    images = rng.random((600, 8)).astype(np.float32)
    return Dataset(images, labels, 10, (2, 4))


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found; set ${DATA_ENV}")
    from sdhfl.presets import mnist as load

    return load()
