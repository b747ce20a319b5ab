"""Signal fusion by learned scaling and shifting of a primary input.

``y = alpha * sigmoid(conv_sc(x2)) * x1 + tanh(conv_sf(x2))``

The primary signal ``x1`` only sees pointwise operations. The additive and
concatenating fusions are kept for ablation runs.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeError

FUSION_KINDS = ("modulate", "add", "concat")


def _check_pair(x1: torch.Tensor, x2: torch.Tensor, primary: int, aux: int) -> None:
    if x1.dim() != 4 or x2.dim() != 4:
        raise ShapeError("fusion inputs must be (B, C, H, W) tensors")
    if x1.shape[-2:] != x2.shape[-2:] or x1.shape[0] != x2.shape[0]:
        raise ShapeError(f"fusion inputs disagree: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if x1.shape[1] != primary or x2.shape[1] != aux:
        raise ShapeError(f"expected {primary}/{aux} channels, got {x1.shape[1]}/{x2.shape[1]}")


class ModulationUnit(nn.Module):
    def __init__(self, primary_channels: int, aux_channels: int, alpha: float = 2.0):
        super().__init__()
        self.primary_channels = primary_channels
        self.aux_channels = aux_channels
        self.conv_sc = nn.Conv2d(aux_channels, primary_channels, 3, padding=1)
        self.conv_sf = nn.Conv2d(aux_channels, primary_channels, 3, padding=1)
        # zero convs + alpha=2 make the unit an exact identity on x1 at init
        for conv in (self.conv_sc, self.conv_sf):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))

    def scale_shift(self, x2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.sigmoid(self.conv_sc(x2)), torch.tanh(self.conv_sf(x2))

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        _check_pair(x1, x2, self.primary_channels, self.aux_channels)
        m_sc, m_sf = self.scale_shift(x2)
        return self.alpha * m_sc * x1 + m_sf


class AddFusion(nn.Module):
    """``x1 + conv(x2)``; the conv keeps the aux signal's channel count aligned."""

    def __init__(self, primary_channels: int, aux_channels: int):
        super().__init__()
        self.primary_channels = primary_channels
        self.aux_channels = aux_channels
        self.conv = nn.Conv2d(aux_channels, primary_channels, 3, padding=1)

    def forward(self, x1, x2):
        _check_pair(x1, x2, self.primary_channels, self.aux_channels)
        return x1 + self.conv(x2)


class ConcatFusion(nn.Module):
    def __init__(self, primary_channels: int, aux_channels: int):
        super().__init__()
        self.primary_channels = primary_channels
        self.aux_channels = aux_channels
        self.conv = nn.Conv2d(primary_channels + aux_channels, primary_channels, 3, padding=1)

    def forward(self, x1, x2):
        _check_pair(x1, x2, self.primary_channels, self.aux_channels)
        return self.conv(torch.cat([x1, x2], dim=1))


def make_fusion(kind: str, primary_channels: int, aux_channels: int) -> nn.Module:
    if kind == "modulate":
        return ModulationUnit(primary_channels, aux_channels)
    if kind == "add":
        return AddFusion(primary_channels, aux_channels)
    if kind == "concat":
        return ConcatFusion(primary_channels, aux_channels)
    raise ValueError(f"unknown fusion {kind!r}; choose from {FUSION_KINDS}")


def modulate(x1: torch.Tensor, x2: torch.Tensor, unit: nn.Module) -> torch.Tensor:
    return unit(x1, x2)


def mod_error(f: torch.Tensor, E: torch.Tensor, unit: nn.Module) -> torch.Tensor:
    """Sensory input is the primary signal, the (2C-channel) error the auxiliary."""
    return unit(f, E)


def mod_pred(p_higher_us: torch.Tensor, f_out: torch.Tensor, unit: nn.Module) -> torch.Tensor:
    """Upsampled higher-level prediction is primary, the recurrent output auxiliary."""
    return unit(p_higher_us, f_out)
