import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from propseg.grids import FeatureGrid


GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_grid_pair(rng, gh=3, gw=4, channels=5, stride=8, signed=False):
    """Two random FeatureGrids of matching shape."""
    lo = -1.0 if signed else 0.0
    a = rng.uniform(lo, 1.0, size=(gh, gw, channels))
    b = rng.uniform(lo, 1.0, size=(gh, gw, channels))
    return FeatureGrid(a, stride=stride), FeatureGrid(b, stride=stride)


def random_blob_mask(rng, h, w):
    """Random nonempty rectangular blob, as a float 0/1 mask."""
    y0 = int(rng.integers(0, h - 2))
    x0 = int(rng.integers(0, w - 2))
    y1 = int(rng.integers(y0 + 1, h))
    x1 = int(rng.integers(x0 + 1, w))
    m = np.zeros((h, w))
    m[y0:y1 + 1, x0:x1 + 1] = 1.0
    return m
