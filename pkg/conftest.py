import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from fusion_vae import HierarchySpec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale trend tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long desk-scale training runs, enabled by --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec():
    """Two scales, 8x8 grayscale images"""
    return HierarchySpec([(2, 2), (1, 4)], latent_channels=2, base_width=4, image_channels=1, image_size=8)


@pytest.fixture
def rgb_spec():
    return HierarchySpec([(1, 4), (1, 8)], latent_channels=2, base_width=4, image_channels=3, image_size=16)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
