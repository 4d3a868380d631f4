import os

import numpy as np
import pytest

import densedenoise

ASSET_DIR = os.path.join(os.path.dirname(densedenoise.__file__), "assets")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=12345))


@pytest.fixture
def asset_dir():
    return ASSET_DIR
