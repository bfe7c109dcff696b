from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    alpha: float = 10.0
    beta: float = 1.0
    delta_max: float = 1.0
    ramp_length: int = 40

    def __post_init__(self):
        if min(self.alpha, self.beta, self.delta_max) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ramp_length < 1:
            raise ValueError("ramp_length must be >= 1")


def _check_binary(y):
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("target mask must be binary")


def dice_loss(probs, y, smooth: float = DICE_SMOOTH):
    inter = (probs * y).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + y.sum() + smooth)


def supervised_loss(probs, y, smooth: float = DICE_SMOOTH):
    """BCE + soft Dice on foreground probabilities.

    ``probs`` may also be a :class:`~crossseq.segnet.Prediction`; its logits are
    then used for a numerically stable BCE.
    """
    logits = getattr(probs, "logits", None)
    if logits is not None:
        probs = probs.probs
    y = y.to(probs.dtype)
    if probs.shape != y.shape:
        raise ValueError(f"prediction {tuple(probs.shape)} and target {tuple(y.shape)} differ")
    _check_binary(y)
    if logits is not None:
        bce = F.binary_cross_entropy_with_logits(logits, y)
    else:
        bce = F.binary_cross_entropy(probs, y)
    return bce + dice_loss(probs, y, smooth)


def consistency_mse(student_probs, teacher_probs):
    if student_probs.shape != teacher_probs.shape:
        raise ValueError("student and teacher maps differ in shape")
    return ((student_probs - teacher_probs) ** 2).mean()


def consistency_weight(epoch: float, weights: LossWeights) -> float:
    """Gaussian warm-up: delta_max * exp(-5 (1 - t)^2), t = min(epoch / ramp_length, 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = min(epoch / weights.ramp_length, 1.0)
    return weights.delta_max * math.exp(-5.0 * (1.0 - t) ** 2)


def total_loss(sup, cons_cse, dcp, epoch, weights: LossWeights):
    for name, value in (("sup", sup), ("cons_cse", cons_cse), ("dcp", dcp)):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite {name} loss: {v}")
    return weights.alpha * sup + consistency_weight(epoch, weights) * cons_cse + weights.beta * dcp
