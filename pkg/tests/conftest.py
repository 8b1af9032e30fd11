import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctrldial.model import DecoderLM, ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw):
    base = dict(vocab_size=13, d_model=8, n_layers=2, n_heads=2, ffn_dim=16, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return DecoderLM(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
