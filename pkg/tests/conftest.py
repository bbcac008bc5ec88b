import numpy as np
import pytest
import torch

from config.run_config import ChannelParams, EpisodeConfig, LinkBudget
from app.services.geometry_service import Building, Environment, Position


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running directional checks (deselect with -m "not slow")')


@pytest.fixture(autouse=True)
def float64_torch():
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def params():
    return ChannelParams()


@pytest.fixture
def noiseless_params():
    return ChannelParams(shadow_sigma_los=0.0, shadow_sigma_nlos=0.0)


@pytest.fixture
def link():
    return LinkBudget()


@pytest.fixture
def open_env():
    """200 m square, one GU on the ground, no buildings."""
    return Environment(200.0, 60.0, 150.0, (), (Position(150.0, 120.0, 0.0),))


@pytest.fixture
def city_env():
    """Two GUs on the ground and one tall block between the origin corner and the first GU."""
    return Environment(
        200.0, 60.0, 150.0,
        (Building((80.0, 80.0), (20.0, 20.0), 50.0),),
        (Position(150.0, 150.0, 0.0), Position(40.0, 160.0, 0.0)),
    )


@pytest.fixture
def episode():
    return EpisodeConfig(t_max=60, payload_bits=2e6)
