import math

import pytest
import torch
from torch.nn import functional as F

from noise2map.exceptions import ConfigError, LabelError, ShapeError
from noise2map.objectives import (
    ClassWeights,
    MultiTaskWeights,
    mse_denoising_loss,
    multitask_loss,
    weighted_cross_entropy,
    weighted_cross_entropy_sum,
)

from conftest import brute_force_wce


def _random(rng, k, shape=(2, 4, 4)):
    logits = torch.from_numpy(rng.standard_normal((shape[0], k) + shape[1:]))
    target = torch.from_numpy(rng.integers(0, k, size=shape))
    return logits, target


def test_zero_logits_give_ln2():
    loss = weighted_cross_entropy(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 3, dtype=torch.long),
                                  ClassWeights.uniform(2))
    assert float(loss) == pytest.approx(math.log(2))


def test_two_pixel_hand_example():
    # pixel a: label 0, logits (2, 0); pixel b: label 1, logits (1, 1)
    logits = torch.tensor([[[[2.0, 1.0]], [[0.0, 1.0]]]], dtype=torch.float64)
    target = torch.tensor([[[0, 1]]])
    nll_a = -math.log(math.exp(2) / (math.exp(2) + 1))
    nll_b = math.log(2)
    expected = (1 * nll_a + 3 * nll_b) / 4
    assert float(weighted_cross_entropy(logits, target, ClassWeights((1, 3)))) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("k", [2, 3])
def test_matches_brute_force(rng, k):
    for _ in range(5):
        logits, target = _random(rng, k)
        w = tuple(rng.uniform(0.5, 5.0, size=k))
        got = float(weighted_cross_entropy(logits, target, ClassWeights(w)))
        assert got == pytest.approx(brute_force_wce(logits.numpy(), target.numpy(), w), rel=1e-6)


def test_uniform_equals_plain_ce(rng):
    logits, target = _random(rng, 3)
    ref = F.cross_entropy(logits, target)
    assert abs(float(weighted_cross_entropy(logits, target, ClassWeights.uniform(3))) - float(ref)) <= 1e-7


def test_confident_correct_tends_to_zero():
    target = torch.tensor([[[0, 1], [1, 0]]])
    logits = F.one_hot(target, 2).permute(0, 3, 1, 2).double() * 200.0
    assert float(weighted_cross_entropy(logits, target, ClassWeights((1, 3)))) < 1e-12


def test_weight_scale_invariance(rng):
    logits, target = _random(rng, 2)
    a = weighted_cross_entropy(logits, target, ClassWeights((1, 3)))
    b = weighted_cross_entropy(logits, target, ClassWeights((7, 21)))
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_pixel_permutation_invariance(rng):
    logits, target = _random(rng, 3, (1, 4, 4))
    perm = torch.from_numpy(rng.permutation(16))
    lp = logits.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    tp = target.reshape(1, 16)[:, perm].reshape(1, 4, 4)
    w = ClassWeights((1, 2, 5))
    assert float(weighted_cross_entropy(lp, tp, w)) == pytest.approx(float(weighted_cross_entropy(logits, target, w)))


def test_sum_form_parts(rng):
    logits, target = _random(rng, 2)
    w = ClassWeights((1, 3))
    num, den = weighted_cross_entropy_sum(logits, target, w)
    assert float(den) == float((target == 0).sum() + 3 * (target == 1).sum())
    assert float(num / den) == pytest.approx(float(weighted_cross_entropy(logits, target, w)))


def test_label_out_of_range_names_index():
    target = torch.zeros(1, 2, 2, dtype=torch.long)
    target[0, 1, 0] = 2
    with pytest.raises(LabelError, match=r"\(0, 1, 0\)"):
        weighted_cross_entropy(torch.zeros(1, 2, 2, 2), target, ClassWeights.uniform(2))


def test_weight_count_mismatch():
    with pytest.raises(ConfigError):
        weighted_cross_entropy(torch.zeros(1, 3, 2, 2), torch.zeros(1, 2, 2, dtype=torch.long), ClassWeights.uniform(2))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        weighted_cross_entropy(torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 3, dtype=torch.long), ClassWeights.uniform(2))


def test_class_weights_validation():
    with pytest.raises(ConfigError):
        ClassWeights((1.0, 0.0))
    with pytest.raises(ConfigError):
        ClassWeights((1.0,))
    assert ClassWeights.from_ratio(3).weights == (1.0, 3.0)


def test_mse_examples():
    a = torch.randn(2, 3, 4, 4)
    assert float(mse_denoising_loss(a, a)) == 0.0
    assert float(mse_denoising_loss(a + 2, a)) == pytest.approx(4.0)
    p = torch.tensor([0.5, -1.0, 2.0, 0.0, 3.0])
    q = torch.tensor([1.0, 1.0, 1.0, 1.0, 1.0])
    assert float(mse_denoising_loss(p, q)) == pytest.approx((0.25 + 4 + 1 + 1 + 4) / 5)
    with pytest.raises(ShapeError):
        mse_denoising_loss(p, q[:4])


@pytest.mark.parametrize("lam,l,expected", [
    ((1, 1), (0.5, 0.7), 1.2),
    ((0.5, 0.5), (0.3, 0.9), 0.6),
    ((0.7, 0), (1, 99), 0.7),
])
def test_multitask_examples(lam, l, expected):
    assert multitask_loss(l[0], l[1], MultiTaskWeights(*lam)) == pytest.approx(expected, abs=1e-15)


def test_multitask_bilinear(rng):
    for _ in range(20):
        a, b, c, d = rng.uniform(0, 5, 4)
        w = MultiTaskWeights(a, b)
        assert multitask_loss(c, d, w) == a * c + b * d
        s = rng.uniform(0.1, 3)
        assert multitask_loss(s * c, s * d, w) == pytest.approx(s * multitask_loss(c, d, w))
        assert multitask_loss(c + 1, d, w) == pytest.approx(multitask_loss(c, d, w) + multitask_loss(1, 0, w))


def test_multitask_weights_validation():
    with pytest.raises(ConfigError):
        MultiTaskWeights(0, 0)
    with pytest.raises(ConfigError):
        MultiTaskWeights(-1, 1)
