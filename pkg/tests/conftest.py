import numpy as np
import pytest

from pemma.models import ModelConfig, SegModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(depth=2, dim=8, heads=2, size=8, features=4)


@pytest.fixture
def tiny_ct(tiny_config):
    return SegModel(tiny_config, "unimodal_ct", np.random.default_rng(7))


def volume(rng, size=8, low=None):
    if low is not None:
        return rng.uniform(low, 1.0, size=(1, size, size, size)).astype(np.float32)
    return rng.normal(size=(1, size, size, size)).astype(np.float32)
