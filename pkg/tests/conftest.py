import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metalens_ot.geometry import Grid2  # noqa: E402

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_grid():
    return Grid2(32, 32, 0.0, 1.0, 0.0, 1.0)


@pytest.fixture
def configs():
    return REPO / "configs"
