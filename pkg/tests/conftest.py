import numpy as np
import pytest
import torch

from unibev.geometry import BEVGridSpec, CameraModel, DepthBinSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_camera():
    return CameraModel.simple(120.0, (128, 192))


@pytest.fixture
def toy_grid():
    return BEVGridSpec.toy()


@pytest.fixture
def small_grid():
    # 16 x 16 BEV for gradient checks
    return BEVGridSpec((0.0, 12.8), (-6.4, 6.4), (-3.0, 2.0), (0.8, 0.8))


@pytest.fixture
def toy_bins():
    return DepthBinSpec.toy()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
