import numpy as np
import pytest

from fpad.backbone import build_classifier
from fpad.dataset import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_model():
    # shared read-only tiny classifier; tests that train build their own
    return build_classifier("tiny", seed=123)


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic(SynthConfig(n_live=10, n_spoof=10), seed=77)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
