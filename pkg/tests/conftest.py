import numpy as np
import pytest
import torch

from util import write_manifest


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def manifest_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("sources")
    return write_manifest(root, n_images=6, size=128, seed=7, objects_per_image=2)
