"""Training losses and their weight schedules.

All squared distances are sums over every element of a sequence (averaged
over the batch), which is what makes ``lambda_lpips = c * h * w`` put the
perceptual term on the same scale as the other two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError, NumericError, StateError


def level_weights(L: int) -> list[float]:
    if L < 2:
        raise ValueError(f"need at least 2 levels, got {L}")
    return [((L - 1) - l) / (L - 1) for l in range(L)]


def time_weights(T: int) -> list[float]:
    return [0.5 if t == 0 else 1.0 for t in range(T)]


@dataclass(frozen=True)
class LossWeights:
    lambda_t: tuple
    lambda_l: tuple
    lambda_lpips: float
    T1: int
    T2: int

    @classmethod
    def build(cls, T1: int, T2: int, L: int, image_shape) -> "LossWeights":
        c, h, w = image_shape
        return cls(tuple(time_weights(T1 + T2)), tuple(level_weights(L)), float(c * h * w), T1, T2)


@dataclass
class LossReport:
    L1: torch.Tensor
    L2: torch.Tensor
    L_lpips: torch.Tensor
    L_total: torch.Tensor

    def as_floats(self) -> dict:
        return {"L1": self.L1.item(), "L2": self.L2.item(),
                "Llpips": self.L_lpips.item(), "Ltotal": self.L_total.item()}


def _sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # per-sequence sum, batch mean
    return (a - b).pow(2).flatten(1).sum(dim=1).mean()


def prediction_loss(features: list, level_predictions: list, weights: LossWeights) -> torch.Tensor:
    """sum_{t>=1} sum_l lambda_t lambda_l ||f_l^t - P_l^{t-1}||^2.

    ``features[t][l]`` and ``level_predictions[t][l]`` cover the same steps.
    """
    T = len(features)
    if len(level_predictions) < T - 1 or T > len(weights.lambda_t):
        raise ValueError("feature and prediction caches are misaligned")
    total = None
    for t in range(1, T):
        if len(features[t]) != len(weights.lambda_l) or len(level_predictions[t - 1]) != len(weights.lambda_l):
            raise ValueError(f"level count mismatch at timestep {t}")
        for l, lam_l in enumerate(weights.lambda_l):
            if lam_l == 0.0:
                continue
            term = weights.lambda_t[t] * lam_l * _sq(features[t][l], level_predictions[t - 1][l])
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def encoding_loss(features: list, predicted_features: dict, weights: LossWeights) -> torch.Tensor:
    """sum_{t>=T1} sum_{l>=1} lambda_t lambda_l ||f_l^t - f_hat_l^t||^2."""
    T = len(features)
    total = None
    for t in range(weights.T1, T):
        if t not in predicted_features:
            raise StateError(f"no predicted-frame encodings for timestep {t}")
        for l in range(1, len(weights.lambda_l)):
            lam_l = weights.lambda_l[l]
            if lam_l == 0.0:
                continue
            term = weights.lambda_t[t] * lam_l * _sq(features[t][l], predicted_features[t][l])
            total = term if total is None else total + term
    if total is None:
        ref = features[0][0]
        return ref.new_zeros(())
    return total


def perceptual_loss(frames: torch.Tensor, predictions: torch.Tensor, weights: LossWeights,
                    backbone) -> torch.Tensor:
    """sum_{t>=1} lambda_t d(x_t, P_0^{t-1}).

    ``frames`` is (B, T, C, H, W); ``predictions`` is (B, T-1, C, H, W).
    """
    if backbone is None:
        raise ConfigError("no perceptual backbone configured")
    total = frames.new_zeros(())
    for t in range(1, frames.shape[1]):
        total = total + weights.lambda_t[t] * backbone.distance(frames[:, t], predictions[:, t - 1])
    return total


def total_loss(L1, L2, L_lpips, weights: LossWeights) -> torch.Tensor:
    for name, v in (("L1", L1), ("L2", L2), ("L_lpips", L_lpips)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise NumericError(f"loss component {name} is not finite ({val})")
    return L1 + L2 + weights.lambda_lpips * L_lpips


def compute_losses(result, weights: LossWeights, backbone: Optional[object] = None) -> LossReport:
    """All three losses for a ``RolloutResult``; ``backbone=None`` disables the perceptual term."""
    L1 = prediction_loss(result.features, result.level_predictions, weights)
    L2 = encoding_loss(result.features, result.predicted_features, weights)
    if backbone is None:
        Lp = L1.new_zeros(())
    else:
        Lp = perceptual_loss(result.inputs, result.predictions, weights, backbone)
    return LossReport(L1, L2, Lp, total_loss(L1, L2, Lp, weights))
