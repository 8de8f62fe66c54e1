import numpy as np
import pytest
from hypothesis import settings

from umfbsde.market import EndowmentSpec, MarketSpec, TimeGrid, simulate_paths
from umfbsde.oracles import ExponentialBachelier
from umfbsde.utility import ExponentialUtility, mixed_exponential

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def eb():
    return ExponentialBachelier()


@pytest.fixture(scope="session")
def expu():
    return ExponentialUtility(1.0)


@pytest.fixture(scope="session")
def mixed():
    return mixed_exponential(0.5, 1.0, 2.0)


@pytest.fixture(scope="session")
def eb_paths():
    """Small EB ensemble for unit tests (the acceptance suite uses full size)."""
    return simulate_paths(MarketSpec(0.1, 0.2), TimeGrid(1.0, 20),
                          EndowmentSpec("constant", 0.5), 4000, 3)


@pytest.fixture(scope="session")
def zero_paths():
    return simulate_paths(MarketSpec(0.0, 0.2), TimeGrid(1.0, 20),
                          EndowmentSpec("constant", 0.0), 2000, 3)


def rms(a):
    return float(np.sqrt(np.mean(np.square(a))))
