"""SSIM and PSNR for frames with unit dynamic range."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_chw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x.detach()).double()
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3:
        raise ShapeError(f"expected an (H, W) or (C, H, W) frame, got shape {tuple(t.shape)}")
    return t


def _gaussian_window() -> torch.Tensor:
    r = SSIM_WIN // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WIN:
        raise ShapeError(f"frames must be at least {SSIM_WIN}x{SSIM_WIN}")
    C = a.shape[0]
    w = _gaussian_window().expand(C, 1, SSIM_WIN, SSIM_WIN)

    def blur(x):
        return F.conv2d(x.unsqueeze(0), w, groups=C)[0]

    c1, c2 = K1 ** 2, K2 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean().item()


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical frames give +inf."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (a - b).pow(2).mean().item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped_psnr(a, b) -> float:
    return min(psnr(a, b), PSNR_CAP)


def mse(a, b) -> float:
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse inputs disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean().item()
