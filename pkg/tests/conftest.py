import pytest

from models.Beckmann import bump_problem
from models.FlowDensity import FlowDensityModel
from models.ReQUNet import CutoffField, ReQUNetwork


@pytest.fixture(scope='session')
def bump():
    return bump_problem(0.5)


@pytest.fixture
def zero_network():
    return ReQUNetwork(2, [4, 2], init_scale=0.0)


@pytest.fixture
def random_field():
    return CutoffField(ReQUNetwork(2, [8, 2], seed=3, init_scale=0.5), K=12, k=4)


@pytest.fixture
def zero_model():
    return FlowDensityModel.build(2, [4, 2], K=12, steps=8, init_scale=0.0)
