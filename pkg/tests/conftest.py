import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from compnet.model import CompNet, ModelConfig

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_batch(rng, B=4, A=3, O=4):
    """Random batch where every image has at least one attribute and one object."""
    Ya = rng.random((B, A)) < 0.4
    Yo = rng.random((B, O)) < 0.3
    Ya[np.arange(B), rng.integers(A, size=B)] = True
    Yo[np.arange(B), rng.integers(O, size=B)] = True
    return Ya, Yo


@pytest.fixture
def tiny_model():
    return CompNet(ModelConfig(6, 5, 3, 4, "mlp", [7], seed=1)).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
