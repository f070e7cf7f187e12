import numpy as np
import pytest
from conftest import small_config
from layer_table import LAYER_TABLE

from exitseg import autodiff as ad
from exitseg.autodiff import Tensor, backward
from exitseg.errors import ConfigError, ShapeError
from exitseg.losses import LossWeights, ensemble_loss, exit_loss
from exitseg.model import (EARLY_EXIT, MCDROP, VANILLA, ModelConfig, build_model, forward,
                           parameter_count)


@pytest.fixture(scope="module")
def full_model():
    return build_model(ModelConfig(), np.random.default_rng(0))


def _shapes(model, x):
    seen = []
    forward(model, x, ad.EVAL, hook=lambda name, shape: seen.append((name, shape)))
    return seen


def test_every_table_shape(full_model):
    seen = _shapes(full_model, Tensor(np.random.default_rng(1).standard_normal((1, 2500))))
    assert len(LAYER_TABLE) == 41
    assert dict(seen) == LAYER_TABLE
    assert len(seen) == len(LAYER_TABLE)


def test_table_rows_highlighted(full_model):
    shapes = dict(_shapes(full_model, Tensor(np.zeros((1, 2500), dtype=np.float32))))
    assert shapes["enc1.conv"] == (5, 2500) and shapes["enc1.pool"] == (5, 1250)
    assert shapes["bottleneck.conv"] == (22, 78)


def test_early_exit_bundle(full_model):
    bundle = forward(full_model, Tensor(np.zeros((1, 2500), dtype=np.float32)))
    assert len(bundle) == 5
    assert all(lg.shape == (2, 2500) for lg in bundle)


def test_vanilla_bundle():
    model = build_model(ModelConfig(variant=VANILLA), np.random.default_rng(0))
    bundle = forward(model, Tensor(np.zeros((2, 1, 2500), dtype=np.float32)))
    assert len(bundle) == 1 and bundle[0].shape == (2, 2, 2500)


def test_encoder_runs_once_per_forward(full_model):
    before = full_model.calls["encoder"]
    forward(full_model, Tensor(np.zeros((1, 2500), dtype=np.float32)))
    assert full_model.calls["encoder"] == before + 1


def test_parameter_counts():
    # hand count: conv c_out*c_in*4 + c_out, BN 2*c_out
    enc = [(1, 5), (5, 7), (7, 9), (9, 12), (12, 16), (16, 22)]
    dec = [(22, 16), (32, 16), (16, 12), (24, 12), (12, 9), (18, 9), (9, 7), (14, 7), (7, 5), (10, 5)]
    conv_bn = sum(o * i * 4 + o + 2 * o for i, o in enc + dec)
    head = (5 * 5 * 4 + 5) + (2 * 5 * 4 + 2)
    exits = sum(2 * c * 4 + 2 for c in (16, 12, 9, 7))
    a = build_model(ModelConfig(), np.random.default_rng(0))
    b = build_model(ModelConfig(), np.random.default_rng(99))
    assert parameter_count(a) == parameter_count(b) == conv_bn + head + exits
    assert parameter_count(build_model(ModelConfig(variant=VANILLA), np.random.default_rng(0))) == conv_bn + head


def test_first_layer_contributions(full_model):
    p = full_model.params
    assert p["enc1.weight"].size + p["enc1.bias"].size == 25
    assert p["enc1.bn.gamma"].size + p["enc1.bn.beta"].size == 10


def test_same_seed_bit_identical():
    a = build_model(ModelConfig(), np.random.default_rng(5)).state_arrays()
    b = build_model(ModelConfig(), np.random.default_rng(5)).state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_init_bounds(full_model):
    w = full_model.params["enc2.weight"].data
    assert np.abs(w).max() <= 1 / np.sqrt(5 * 4)
    assert not full_model.params["enc2.bias"].data.any()


def test_mcdrop_sampling_and_eval(small_model):
    model = small_model(MCDROP)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 64)).astype(np.float32))
    a = forward(model, x, ad.EVAL_SAMPLING, np.random.default_rng(1))[0].data
    b = forward(model, x, ad.EVAL_SAMPLING, np.random.default_rng(2))[0].data
    assert not np.array_equal(a, b)
    e1, e2 = forward(model, x, ad.EVAL)[0].data, forward(model, x, ad.EVAL)[0].data
    np.testing.assert_array_equal(e1, e2)


def test_eval_is_pure(small_model):
    model = small_model(EARLY_EXIT)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 1, 64)).astype(np.float32))
    first = [lg.data.copy() for lg in forward(model, x)]
    second = [lg.data for lg in forward(model, x)]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_exit1_loss_reaches_encoder(small_model):
    model = small_model(EARLY_EXIT)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 1, 64)).astype(np.float32))
    y = np.zeros((2, 64), dtype=int)
    y[:, 10:20] = 1
    bundle = forward(model, x, ad.TRAIN)
    backward(exit_loss(bundle[0], y, LossWeights()))
    assert np.abs(model.params["enc1.weight"].grad).sum() > 0


def test_zero_alpha_exit_gets_no_gradient(small_model):
    model = small_model(EARLY_EXIT)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 1, 64)).astype(np.float32))
    y = np.zeros((2, 64), dtype=int)
    backward(ensemble_loss(forward(model, x, ad.TRAIN), y, LossWeights([0.0, 1.0])))
    assert model.params["exit1.conv.weight"].grad is None
    assert model.params["head.conv2.weight"].grad is not None


def test_wrong_input_shape(full_model):
    with pytest.raises(ShapeError):
        forward(full_model, Tensor(np.zeros((1, 2000), dtype=np.float32)))


def test_inconsistent_channels_rejected():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(decoder_channels=[16, 12, 9, 7, 6]), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = small_config(MCDROP)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
