import numpy as np
import pytest

from headopt.headmodel import DeskModelSpec, make_desk_model


@pytest.fixture(scope="session")
def desk_model():
    return make_desk_model(DeskModelSpec(subdivisions=2))


@pytest.fixture(scope="session")
def small_model():
    return make_desk_model(DeskModelSpec(subdivisions=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
