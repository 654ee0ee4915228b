import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mesh_core import grid_mesh  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid():
    return grid_mesh(5, 5, keypoints=(0, 4, 24))


@pytest.fixture
def small_grid():
    return grid_mesh(4, 4, keypoints=(0, 3, 15))
