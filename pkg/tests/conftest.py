import numpy as np
import pytest
import torch

from planarhoi.motion import generate_clip

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def walk_clip():
    return generate_clip("walk", 4.0, seed=11)


@pytest.fixture(scope="session")
def reach_clip():
    return generate_clip("reach", 4.0, seed=12)


@pytest.fixture(scope="session")
def carry_clip():
    return generate_clip("carry", 4.0, seed=13)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
