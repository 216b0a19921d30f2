"""Compound soft-Dice + cross-entropy training loss.

total = [1 - (1/N_c) * sum_c 2*sum_j(L*Y) / (sum_j L^2 + sum_j Y^2)]
      + [-(1/N_y) * sum_c sum_j L * log(Y)]

with Y the per-voxel class softmax of the logits, L the one-hot labels, unit
weights on both terms, and the log clamped at 1e-12.
"""

from __future__ import annotations

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor

LOG_FLOOR = 1e-12


def class_probabilities(logits: Tensor) -> Tensor:
    """Softmax over the class channel; [K, W, H, D] -> [N_voxels, K]."""
    k = logits.shape[0]
    n = logits.size // k
    return T.softmax_lastdim(T.transpose2d(T.reshape(logits, (k, n))))


def soft_dice_ce_parts(logits: Tensor, onehot: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(total, dice term, cross-entropy term); the parts sum to the total."""
    if logits.shape != onehot.shape or logits.data.ndim != 4:
        raise ShapeMismatch(f"logits {logits.shape} vs one-hot labels {onehot.shape}")
    k = logits.shape[0]
    n = logits.size // k
    probs = class_probabilities(logits)                       # [N, K]
    labels = T.transpose2d(T.reshape(onehot, (k, n)))         # [N, K]

    dice_sum: Tensor | None = None
    for c in range(k):
        y = T.narrow(probs, 1, c, 1)
        l = T.narrow(labels, 1, c, 1)
        den = T.add(T.tsum(T.mul(l, l)), T.tsum(T.mul(y, y)))
        if den.item() == 0.0:
            # class absent from labels and prediction support: contributes a
            # perfect score, i.e. zero loss
            dice_c = Tensor(1.0)
        else:
            num = T.mul(Tensor(2.0), T.tsum(T.mul(l, y)))
            dice_c = T.div(num, den)
        dice_sum = dice_c if dice_sum is None else T.add(dice_sum, dice_c)
    dice_term = T.sub(Tensor(1.0), T.mul(dice_sum, Tensor(1.0 / k)))

    log_y = T.log(T.clamp_min(probs, LOG_FLOOR))
    ce_term = T.mul(T.tsum(T.mul(labels, log_y)), Tensor(-1.0 / n))

    return T.add(dice_term, ce_term), dice_term, ce_term


def soft_dice_ce_loss(logits: Tensor, onehot: Tensor) -> Tensor:
    total, _, _ = soft_dice_ce_parts(logits, onehot)
    return total
