import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multitask_inr.geometry import make_dataset

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    """Nine shapes, three each of dumbbell, table and cross."""
    return make_dataset("dumbbell,table,cross", 9, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
