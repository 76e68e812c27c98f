import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dasmae import tensor as T


@pytest.fixture(autouse=True)
def clean_tape():
    """Every test starts and ends with an empty tape."""
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
