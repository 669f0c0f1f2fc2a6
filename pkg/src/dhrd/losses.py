"""The three training objectives: classification CE, masked next-token CE,
and their weighted sum.

The next-token loss uses arrays already aligned to the input positions:
``targets[i, t]`` is the token expected at position t+1 and ``mask[i, t]``
marks whether that target is valid. N is the global count of valid targets
in the batch; the loss is normalized by that single N, not per sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossError(Exception):
    pass


class LabelOutOfRange(LossError):
    pass


class DegenerateMask(LossError):
    pass


class NonFiniteLoss(LossError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # weight on the reasoning (LM) loss
    beta: float = 1.0  # weight on the classification loss

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise LossError("(alpha, beta) == (0, 0) trains nothing")


@dataclass
class LossReport:
    loss_cls: float
    loss_reason: float
    loss_total: float
    n_targets: int


def cls_loss(z: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the gold class over the batch."""
    labels = np.asarray(labels)
    B, K = z.data.shape
    if np.any(labels < 0) or np.any(labels >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    picked = ad.take_per_row(ad.log_softmax_rows(z), labels)
    return ad.scale(ad.sum_all(picked), -1.0 / B)


def reason_loss(logits: Tensor, targets, mask) -> Tuple[Tensor, int]:
    """Masked next-token cross-entropy, normalized by the batch-global target
    count N. Returns (loss, N); an all-zero mask is an error, never 0/0."""
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    B, T, V = logits.data.shape
    if targets.shape != (B, T) or mask.shape != (B, T):
        raise LossError(f"targets/mask must be shaped {(B, T)}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateMask("no valid next-token targets in batch (N == 0)")
    lsm = ad.log_softmax_rows(ad.reshape(logits, (B * T, V)))
    picked = ad.take_per_row(lsm, targets.reshape(-1))
    masked = ad.mul(picked, ad.constant(mask.reshape(-1).astype(logits.data.dtype)))
    return ad.scale(ad.sum_all(masked), -1.0 / n), n


def total_loss(l_cls: Tensor, l_reason: Tensor, w: LossWeights) -> Tensor:
    """beta * L_cls + alpha * L_reason."""
    if not (math.isfinite(float(l_cls.data)) and math.isfinite(float(l_reason.data))):
        raise NonFiniteLoss("non-finite component loss")
    return ad.add(ad.scale(l_cls, w.beta), ad.scale(l_reason, w.alpha))
