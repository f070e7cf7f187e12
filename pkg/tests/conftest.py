import numpy as np
import pytest

from exitseg.data import SegmentArrays
from exitseg.model import ModelConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(variant="early_exit", length=64, **kw) -> ModelConfig:
    """A narrow network on short inputs for fast unit tests."""
    return ModelConfig(encoder_channels=[2, 3, 4], decoder_channels=[3, 2], input_length=length,
                       variant=variant, **kw)


@pytest.fixture
def small_model():
    def make(variant="early_exit", seed=0, **kw):
        return build_model(small_config(variant, **kw), np.random.default_rng(seed))
    return make


def separable_arrays(n, length=64, seed=0, patient=0) -> SegmentArrays:
    """Noise with a high-amplitude burst over the labelled run."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, length)).astype(np.float32) * 0.3
    y = np.zeros((n, length), dtype=np.uint8)
    for i in range(n):
        if i % 2 == 0:
            a = int(rng.integers(0, length // 2))
            b = a + int(rng.integers(length // 8, length // 3))
            y[i, a:b] = 1
            x[i, 0, a:b] += np.float32(4.0) * np.sign(rng.standard_normal(b - a)).astype(np.float32)
    return SegmentArrays(x, y, np.full(n, patient, dtype=np.uint32))


@pytest.fixture
def separable():
    return separable_arrays
