import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from asbc.sim import GAUSSIAN
from asbc.synth import synthetic_pairs

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_pairs():
    return synthetic_pairs(12, 60.0, 0.2, GAUSSIAN, seed=3)


@pytest.fixture(scope="session")
def small_segments(small_pairs):
    return [p.segment for p in small_pairs]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
