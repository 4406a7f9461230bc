import numpy as np
import pytest
import torch

from jetfit.data_io import ShapeSpec, generate_shape


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


@pytest.fixture
def plane_cloud():
    return generate_shape(ShapeSpec("plane", sample_count=2000, seed=3, rotate=True))
