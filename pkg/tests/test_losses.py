import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitseg.autodiff import Tensor
from exitseg.errors import ConfigError, DataError, ShapeError
from exitseg.losses import LossWeights, cross_entropy, dice_loss, ensemble_loss, exit_loss


def _logits(rows):
    return Tensor(np.asarray(rows, dtype=np.float64))


def _ce_oracle(z, y):
    z = np.asarray(z, dtype=np.float64)
    logp = z - np.log(np.exp(z).sum(axis=0))
    return -np.mean(logp[y, np.arange(z.shape[1])])


def test_ce_uniform_is_ln2():
    assert math.isclose(cross_entropy(_logits(np.zeros((2, 9))), [0, 1, 1, 0, 1, 0, 0, 0, 1]).item(),
                        math.log(2), rel_tol=1e-12)


def test_ce_large_margin():
    y = np.array([0, 1, 1, 0])
    z = np.zeros((2, 4))
    z[y, np.arange(4)] = 20
    assert cross_entropy(_logits(z), y).item() < 1e-6


def test_ce_closed_form():
    assert math.isclose(cross_entropy(_logits([[math.log(3)], [0.0]]), [0]).item(), -math.log(0.75), rel_tol=1e-12)
    assert abs(-math.log(0.75) - 0.2877) < 1e-4


def test_ce_matches_oracle(rng):
    z = rng.standard_normal((2, 30))
    y = rng.integers(0, 2, 30)
    assert math.isclose(cross_entropy(_logits(z), y).item(), _ce_oracle(z, y), rel_tol=1e-12)


def test_ce_rejects_bad_label():
    with pytest.raises(DataError):
        cross_entropy(_logits(np.zeros((2, 3))), [0, 1, 3])


def test_dice_perfect_all_artifact():
    z = np.zeros((2, 100))
    z[1] = 20
    assert dice_loss(_logits(z), np.ones(100), 1.0).item() < 1e-3


def test_dice_all_clean_confident():
    z = np.zeros((2, 100))
    z[0] = 30
    assert dice_loss(_logits(z), np.zeros(100), 1.0).item() < 1e-9


def test_dice_half_half():
    T, s = 1000, 1.0
    y = np.zeros(T)
    y[: T // 2] = 1
    expected = 1 - (T / 2 + s) / (T + s)
    assert math.isclose(dice_loss(_logits(np.zeros((2, T))), y, s).item(), expected, rel_tol=1e-12)
    assert abs(expected - 0.5) < 1e-3


def test_dice_batch_is_mean_of_samples(rng):
    z = rng.standard_normal((3, 2, 20))
    y = rng.integers(0, 2, (3, 20))
    per = [dice_loss(_logits(z[i]), y[i]).item() for i in range(3)]
    assert math.isclose(dice_loss(_logits(z), y).item(), np.mean(per), rel_tol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 10))
@settings(max_examples=40, deadline=None)
def test_dice_range_and_nonnegative_losses(seed, smooth):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, 16)) * 5
    y = rng.integers(0, 2, 16)
    d = dice_loss(_logits(z), y, smooth).item()
    assert 0 <= d < 1
    assert cross_entropy(_logits(z), y).item() >= 0


def test_dice_rejects_nonpositive_smooth():
    with pytest.raises(ConfigError):
        dice_loss(_logits(np.zeros((2, 3))), [0, 0, 0], 0.0)


def test_exit_loss_projections(rng):
    z, y = _logits(rng.standard_normal((2, 12))), rng.integers(0, 2, 12)
    assert exit_loss(z, y, LossWeights(ce_weight=1, dice_weight=0)).item() == cross_entropy(z, y).item()
    assert exit_loss(z, y, LossWeights(ce_weight=0, dice_weight=1)).item() == dice_loss(z, y).item()


def test_exit_loss_uniform_half():
    T = 2000
    y = np.zeros(T)
    y[: T // 2] = 1
    val = exit_loss(_logits(np.zeros((2, T))), y, LossWeights()).item()
    assert abs(val - (math.log(2) + 0.5)) < 1e-3


def test_ensemble_masking_and_linearity(rng):
    bundle = [_logits(rng.standard_normal((2, 15))) for _ in range(5)]
    y = rng.integers(0, 2, 15)
    single = [exit_loss(lg, y, LossWeights()).item() for lg in bundle]
    assert math.isclose(ensemble_loss(bundle, y, LossWeights([1, 0, 0, 0, 0])).item(), single[0], abs_tol=1e-12)
    assert math.isclose(ensemble_loss(bundle, y, LossWeights()).item(), sum(single), rel_tol=1e-12)
    same = [bundle[0]] * 5
    assert math.isclose(ensemble_loss(same, y, LossWeights()).item(), 5 * single[0], rel_tol=1e-12)


def test_ensemble_records_per_exit(rng):
    bundle = [_logits(rng.standard_normal((2, 8))) for _ in range(5)]
    y = rng.integers(0, 2, 8)
    per: list = []
    ensemble_loss(bundle, y, LossWeights([1, 0, 2, 0, 1]), per)
    assert per == pytest.approx([exit_loss(lg, y, LossWeights()).item() for lg in bundle], rel=1e-12)


def test_ensemble_length_mismatch():
    with pytest.raises(ShapeError):
        ensemble_loss([_logits(np.zeros((2, 3)))] * 4, [0, 0, 0], LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights([1, -1, 1, 1, 1]).validate(5)
    with pytest.raises(ConfigError):
        LossWeights([1, 1]).validate(5)
