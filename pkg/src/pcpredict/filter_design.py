"""Hamming-windowed sinc low-pass filters with learnable cutoff ratios.

The cutoff is parametrised as the ratio ``rho = 2 * f_c / f_s`` and kept in
(0, 1) by passing an unconstrained per-channel ``theta`` through a logistic.
A 25-tap 1-D filter is reshaped row-major into a 5x5 depthwise kernel.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import torch
import torch.nn as nn

from .errors import ConfigError, DegenerateFilterError

KERNEL_SIZE = 5
DEFAULT_TAPS = KERNEL_SIZE * KERNEL_SIZE
DEFAULT_RATIO = 0.75
MIN_RATIO = 1e-6

Ratio = Union[float, torch.Tensor]


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def hamming_window(N: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """w(n) = 0.54 - 0.46 cos(2 pi n / N), n = 0..N-1.

    The denominator is N, not N - 1, so the window is slightly asymmetric.
    """
    if N < 1:
        raise ValueError(f"filter length must be >= 1, got {N}")
    n = torch.arange(N, dtype=dtype)
    return 0.54 - 0.46 * torch.cos(2.0 * math.pi * n / N)


def _as_ratio(ratio: Ratio, allow_unit: bool) -> torch.Tensor:
    r = ratio if torch.is_tensor(ratio) else torch.tensor(float(ratio), dtype=torch.float64)
    with torch.no_grad():
        if bool(torch.any(r <= 0)):
            raise ValueError("cutoff ratio must be > 0")
        upper_bad = torch.any(r > 1) if allow_unit else torch.any(r >= 1)
        if bool(upper_bad):
            raise ValueError("cutoff ratio must be < 1 (or == 1 with allow_unit=True)")
    return r


def windowed_sinc(ratio: Ratio, N: int, allow_unit: bool = False) -> torch.Tensor:
    """Ideal low-pass coefficients rho * sinc(rho * (n - (N-1)/2)).

    ``ratio`` may be a tensor of any shape; the taps go on a new last axis.
    Uses the normalized sinc, sin(pi x) / (pi x).
    """
    if N < 1:
        raise ValueError(f"filter length must be >= 1, got {N}")
    r = _as_ratio(ratio, allow_unit).unsqueeze(-1)
    n = torch.arange(N, dtype=r.dtype) - 0.5 * (N - 1)
    return r * torch.sinc(r * n)


def build_1d_filter(ratio: Ratio, N: int = DEFAULT_TAPS, allow_unit: bool = False) -> torch.Tensor:
    """Windowed sinc taps rescaled to unit DC gain (taps sum to 1)."""
    h = windowed_sinc(ratio, N, allow_unit) * hamming_window(N, dtype=_dtype_of(ratio))
    total = h.sum(dim=-1, keepdim=True)
    if bool(torch.any(total.detach() <= 0)):
        raise DegenerateFilterError("filter taps sum to a non-positive value")
    return h / total


def _dtype_of(ratio: Ratio) -> torch.dtype:
    return ratio.dtype if torch.is_tensor(ratio) else torch.float64


class CutoffParams(nn.Module):
    """Per-channel learnable cutoff ratios, ``ratio = logistic(theta)``."""

    def __init__(self, channels: int, N: int = DEFAULT_TAPS, init_ratio: float = DEFAULT_RATIO):
        super().__init__()
        if N < 1:
            raise ValueError(f"filter length must be >= 1, got {N}")
        self.N = N
        self.theta = nn.Parameter(torch.full((channels,), logit(init_ratio)))

    @property
    def channels(self) -> int:
        return self.theta.numel()

    def ratio(self) -> torch.Tensor:
        # logistic saturates to exactly 0 in floating point; keep a usable floor
        return torch.sigmoid(self.theta).clamp(min=MIN_RATIO)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, N={self.N}"


def kernel_from_ratio(ratio: torch.Tensor, N: int = DEFAULT_TAPS, mode: str = "reshape",
                      allow_unit: bool = False) -> torch.Tensor:
    """Turn a (C,) vector of ratios into a (C, 1, 5, 5) depthwise kernel.

    ``mode="reshape"`` lays a 25-tap filter out row-major; ``mode="separable"``
    takes the outer product of a 5-tap filter with itself.
    """
    C = ratio.shape[0]
    if mode == "reshape":
        if N != DEFAULT_TAPS:
            raise ConfigError(f"reshape mode needs N={DEFAULT_TAPS}, got N={N}")
        h = build_1d_filter(ratio, N, allow_unit)
        return h.reshape(C, 1, KERNEL_SIZE, KERNEL_SIZE)
    if mode == "separable":
        if N != KERNEL_SIZE:
            raise ConfigError(f"separable mode needs N={KERNEL_SIZE}, got N={N}")
        h = build_1d_filter(ratio, N, allow_unit)
        # outer product of unit-sum taps is itself unit-sum
        return (h.unsqueeze(-1) * h.unsqueeze(-2)).unsqueeze(1)
    raise ConfigError(f"unknown kernel mode {mode!r}")


def build_depthwise_kernel(params: CutoffParams, mode: str = "reshape") -> torch.Tensor:
    # saturated logistic can hit exactly 1, which is the identity kernel
    return kernel_from_ratio(params.ratio(), params.N, mode, allow_unit=True)


def ratio_stats(levels: Sequence[Union[CutoffParams, torch.Tensor, Iterable]]) -> list[tuple[float, float]]:
    """Mean and population standard deviation of the ratios at each level.

    Each entry is a ``CutoffParams``, a tensor of thetas, or an iterable of
    either (pooled into one level).
    """
    if len(levels) == 0:
        raise ValueError("need at least one level")
    out = []
    for i, level in enumerate(levels):
        thetas = _collect_thetas(level)
        if thetas.numel() == 0:
            raise ValueError(f"level {i} has no channels")
        r = torch.sigmoid(thetas.double())
        out.append((r.mean().item(), r.std(unbiased=False).item()))
    return out


def _collect_thetas(level) -> torch.Tensor:
    if isinstance(level, CutoffParams):
        return level.theta.detach().flatten()
    if torch.is_tensor(level):
        return level.detach().flatten()
    parts = [_collect_thetas(p) for p in level]
    if not parts:
        return torch.zeros(0)
    return torch.cat([p.double() for p in parts])
