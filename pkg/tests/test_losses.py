import math

import numpy as np
import pytest

from gasaunet import tensor as T
from gasaunet.errors import ShapeMismatch
from gasaunet.losses import soft_dice_ce_loss, soft_dice_ce_parts
from gasaunet.tensor import Rng, Tensor
from gasaunet.verify import fd_grad, max_rel_err


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.stack([(labels == c).astype(np.float64) for c in range(k)])


def test_perfect_hard_prediction_zero_loss():
    labels = np.zeros((3, 3, 3), dtype=int)
    labels[1:, 1:, 1:] = 1
    oh = one_hot(labels, 2)
    logits = Tensor((oh * 2.0 - 1.0) * 60.0)  # saturates the softmax
    loss = soft_dice_ce_loss(logits, Tensor(oh))
    assert abs(loss.item()) <= 1e-9


def test_uniform_two_class_ce_is_ln2():
    labels = (np.arange(8).reshape(2, 2, 2) % 2).astype(int)
    oh = one_hot(labels, 2)
    logits = Tensor(np.zeros((2, 2, 2, 2)))
    _, _, ce = soft_dice_ce_parts(logits, Tensor(oh))
    assert abs(ce.item() - math.log(2.0)) <= 1e-9


def test_total_matches_direct_formula_on_2cube():
    # independent dense evaluation of the displayed loss on a 2^3 volume
    rng = Rng(2)
    logits = rng.normal_array(2 * 8).reshape(2, 2, 2, 2)
    labels = (rng.uniform_array(8).reshape(2, 2, 2) > 0.4).astype(int)
    oh = one_hot(labels, 2)

    z = logits.reshape(2, 8)
    e = np.exp(z - z.max(axis=0))
    y = e / e.sum(axis=0)
    l = oh.reshape(2, 8)
    dice = 0.0
    for c in range(2):
        dice += 2.0 * (l[c] * y[c]).sum() / ((l[c] ** 2).sum() + (y[c] ** 2).sum())
    expect = (1.0 - dice / 2.0) - (l * np.log(np.maximum(y, 1e-12))).sum() / 8.0

    got = soft_dice_ce_loss(Tensor(logits), Tensor(oh)).item()
    assert got == pytest.approx(expect, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = Rng(3)
    logits = Tensor(rng.normal_array(2 * 27).reshape(2, 3, 3, 3), requires_grad=True)
    labels = (rng.uniform_array(27).reshape(3, 3, 3) > 0.5).astype(int)
    oh = Tensor(one_hot(labels, 2))

    def f():
        return soft_dice_ce_loss(logits, oh)

    f().backward()
    assert max_rel_err(logits.grad, fd_grad(f, logits)) <= 1e-4


def test_loss_nonnegative_random_inputs():
    rng = Rng(4)
    for _ in range(1000):
        k = 2 + rng.randint(2)
        logits = Tensor(rng.normal_array(k * 8).reshape(k, 2, 2, 2) * 3.0)
        labels = np.floor(rng.uniform_array(8) * k).astype(int).reshape(2, 2, 2)
        loss = soft_dice_ce_loss(logits, Tensor(one_hot(labels, k)))
        assert loss.item() >= 0.0


def test_absent_class_guard():
    # class 2 never appears in the labels
    labels = np.zeros((2, 2, 2), dtype=int)
    labels[0, 0, 0] = 1
    oh = one_hot(labels, 3)

    # tiny but nonzero predicted mass: the ratio is 0/positive = 0, so the
    # absent class costs 1/N_c, exactly as the formula says
    loss_soft = soft_dice_ce_loss(Tensor((oh * 2.0 - 1.0) * 60.0), Tensor(oh))
    assert loss_soft.item() == pytest.approx(1.0 / 3.0, abs=1e-9)

    # fully underflowed mass: zero support on both sides trips the guard and
    # the absent class contributes a perfect score
    loss_hard = soft_dice_ce_loss(Tensor((oh * 2.0 - 1.0) * 500.0), Tensor(oh))
    assert abs(loss_hard.item()) <= 1e-9


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        soft_dice_ce_loss(Tensor(np.zeros((2, 2, 2, 2))), Tensor(np.zeros((3, 2, 2, 2))))
