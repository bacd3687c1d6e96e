import numpy as np
import pytest

from dcsam.config import TrainConfig
from dcsam.episodes import gen_episode


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


@pytest.fixture
def small_cfg():
    return TrainConfig(lr=1e-2, steps=5, batch=2, seed=11, canvas=8)


@pytest.fixture
def small_episode():
    return gen_episode(2, 404, (8, 8))
