import numpy as np
import pytest

from s6snn.model import NetworkConfig, S6Network
from s6snn.ssm import ContinuousSSMParams, discretize, hippo_legs


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def stable_params(n: int, rng: np.random.Generator, delta: float = 0.05) -> ContinuousSSMParams:
    """Single-head HiPPO system with a random readout."""
    return ContinuousSSMParams(
        A=hippo_legs(n),
        B=np.ones((n, 1)) / np.sqrt(n),
        C=rng.normal(0.0, 1.0, size=(1, n)),
        log_delta=np.log(delta),
    )


@pytest.fixture
def stable_discrete(rng):
    def make(n: int):
        return discretize(stable_params(n, rng))

    return make


@pytest.fixture
def tiny_model():
    def make(**overrides):
        cfg = dict(num_blocks=1, num_neurons=4, state_dim=4, input_features=1, num_classes=3)
        cfg.update(overrides)
        return S6Network(NetworkConfig(**cfg), seed=0)

    return make
