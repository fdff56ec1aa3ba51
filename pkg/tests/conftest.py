import os

import numpy as np
import pytest

from src.algorithm.cnn import build_model
from src.core.numeric import make_rng


def pytest_collection_modifyitems(config, items):
    if os.getenv('SAFEOCC_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set SAFEOCC_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_model():
    """Two conv blocks on 8x8 single-channel inputs, two outputs"""
    return build_model((8, 8, 1), [3, 4], 2, dense_units=5, rng=make_rng(7))


@pytest.fixture
def tiny_images(rng):
    return rng.uniform(0.0, 1.0, size=(12, 8, 8, 1))
