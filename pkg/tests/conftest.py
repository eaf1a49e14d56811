import pytest
import torch

from goalnet.core import make_grid_spec

torch.set_num_threads(1)


@pytest.fixture
def grid32():
    # 32x32 grid at unit scale
    return make_grid_spec((32, 32), (32, 32), 1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from helpers import write_tiny_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    return write_tiny_dataset(root)
