import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("vish", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vish")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
