import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clrlab.fixtures import build_fixture_13bus, build_fixture_123bus
from clrlab.forecast import ForecastConfig, build_dataset, synthetic_history

settings.register_profile("clrlab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("clrlab")


@pytest.fixture(scope="session")
def net13():
    return build_fixture_13bus()


@pytest.fixture(scope="session")
def net123():
    return build_fixture_123bus()


@pytest.fixture(scope="session")
def store13(net13):
    return synthetic_history(net13, 30, 7, 0)


@pytest.fixture(scope="session")
def train13(net13, store13):
    return build_dataset(store13, net13, ForecastConfig(epsilon_T=0.1), 32, "train")


@pytest.fixture(scope="session")
def test13_eps0(net13, store13):
    return build_dataset(store13, net13, ForecastConfig(epsilon_T=0.0), 16, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
