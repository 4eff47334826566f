import numpy as np
import pytest

from highway_rpf import nets


@pytest.fixture
def arch():
    return nets.NetArch()


@pytest.fixture
def small_arch():
    # keeps finite-difference sweeps cheap
    return nets.NetArch(conv_filters=8, fc_units=12, n_actions=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_observation(rng, n_vehicles, arch=None):
    arch = arch or nets.NetArch()
    size = arch.ego_inputs + arch.per_vehicle_inputs * n_vehicles
    return rng.uniform(-1.0, 1.0, size=size)
