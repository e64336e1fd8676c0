import numpy as np
import pytest

from gazerefine.geometry import EVE_SCREEN


@pytest.fixture
def screen():
    return EVE_SCREEN


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
