"""Training losses: weighted cross-entropy, denoising MSE and the multi-task sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch.nn import functional as F

from .exceptions import ConfigError, LabelError, ShapeError


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) < 2:
            raise ConfigError("class weights need at least two entries")
        if any(not v > 0 for v in w):
            raise ConfigError(f"class weights must all be > 0, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, k: int) -> "ClassWeights":
        return cls((1.0,) * k)

    @classmethod
    def from_ratio(cls, foreground: float, background: float = 1.0) -> "ClassWeights":
        """Binary weights from a ``foreground:background`` ratio such as 3:1."""
        return cls((background, foreground))

    def __len__(self):
        return len(self.weights)

    def tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.tensor(self.weights, dtype=like.dtype, device=like.device)


@dataclass(frozen=True)
class MultiTaskWeights:
    lambda_cd: float = 1.0
    lambda_ss: float = 1.0

    def __post_init__(self):
        if self.lambda_cd < 0 or self.lambda_ss < 0:
            raise ConfigError("multi-task weights must be non-negative")
        if self.lambda_cd == 0 and self.lambda_ss == 0:
            raise ConfigError("multi-task weights cannot both be zero")


def _check_labels(logits, target, k):
    if logits.dim() != 4 or target.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not line up")
    bad = (target < 0) | (target >= k)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0])
        raise LabelError(f"target value {int(target[idx])} at index {idx} outside [0, {k})")


def weighted_cross_entropy_sum(logits, target, w: ClassWeights):
    """Return ``(sum_p w[y_p] * nll_p, sum_p w[y_p])``.

    Splitting numerator and denominator lets gradient accumulation normalize
    by the weight mass of the whole accumulated group.
    """
    k = logits.shape[1]
    if len(w) != k:
        raise ConfigError(f"{len(w)} class weights for {k} classes")
    _check_labels(logits, target, k)
    wt = w.tensor(logits)
    num = F.cross_entropy(logits, target, weight=wt, reduction="sum")
    den = wt[target].sum()
    return num, den


def weighted_cross_entropy(logits: torch.Tensor, target: torch.Tensor, w: ClassWeights) -> torch.Tensor:
    """Weighted mean of per-pixel negative log-likelihoods.

    Normalized by the sum of the weights actually applied, so scaling every
    class weight by the same constant leaves the loss unchanged.
    """
    num, den = weighted_cross_entropy_sum(logits, target, w)
    return num / den


def mse_denoising_loss(predicted_noise: torch.Tensor, true_noise: torch.Tensor) -> torch.Tensor:
    if predicted_noise.shape != true_noise.shape:
        raise ShapeError(f"shape mismatch: {tuple(predicted_noise.shape)} vs {tuple(true_noise.shape)}")
    return F.mse_loss(predicted_noise, true_noise)


def multitask_loss(l_cd, l_ss, w: MultiTaskWeights):
    return w.lambda_cd * l_cd + w.lambda_ss * l_ss


def class_weights_from(values: Sequence[float] | None, k: int) -> ClassWeights:
    return ClassWeights.uniform(k) if values is None else ClassWeights(tuple(values))
