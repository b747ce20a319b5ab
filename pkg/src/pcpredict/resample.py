"""Anti-aliased 2x downsampling and zero-interleave 2x upsampling stages."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .filter_design import KERNEL_SIZE, CutoffParams, DEFAULT_TAPS, build_depthwise_kernel

INTERP_SIZE = 7
LEAKY_SLOPE = 0.1


def init_interp_kernel(dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """7x7 inverse-distance interpolation kernel for zero-interleaved maps.

    Each parity class of kernel offsets serves exactly one parity class of
    output pixels, so every class is normalised to sum to 1 on its own.
    (even, even) offsets keep only the centre tap, which passes the original
    samples through unchanged.
    """
    k = torch.zeros(INTERP_SIZE, INTERP_SIZE, dtype=torch.float64)
    offsets = range(-3, 4)
    for row_parity, col_parity in ((1, 1), (0, 1), (1, 0)):
        cells = [(dy, dx) for dy in offsets for dx in offsets
                 if abs(dy) % 2 == row_parity and abs(dx) % 2 == col_parity]
        inv = [1.0 / math.hypot(dy, dx) for dy, dx in cells]
        total = sum(inv)
        for (dy, dx), v in zip(cells, inv):
            k[dy + 3, dx + 3] = v / total
    k[3, 3] = 1.0
    return k.to(dtype)


def zero_interleave(f: torch.Tensor, m: int = 2) -> torch.Tensor:
    """Place sample (i, j) at (2i+1, 2j+1) of a twice-as-large zero map."""
    if m != 2:
        raise ValueError(f"only factor 2 is supported, got {m}")
    B, C, H, W = f.shape
    out = f.new_zeros(B, C, 2 * H, 2 * W)
    out[..., 1::2, 1::2] = f
    return out


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")


class DownsampleStage(nn.Module):
    """3x3 feature conv, leaky ReLU, then depthwise low-pass with stride 2.

    With ``use_filter=False`` the low-pass is dropped and the map is simply
    decimated, which is what a centre one-hot kernel would do.
    """

    def __init__(self, in_channels: int, out_channels: int, use_filter: bool = True,
                 kernel_mode: str = "reshape", bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_mode = kernel_mode
        self.feature_conv = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=bias)
        if use_filter:
            taps = DEFAULT_TAPS if kernel_mode == "reshape" else KERNEL_SIZE
            self.lowpass = CutoffParams(out_channels, N=taps)
        else:
            self.lowpass = None

    def filter_step(self, x: torch.Tensor) -> torch.Tensor:
        if self.lowpass is None:
            return x[..., ::2, ::2]
        k = build_depthwise_kernel(self.lowpass, self.kernel_mode).to(x.dtype)
        return F.conv2d(x, k, stride=2, padding=KERNEL_SIZE // 2, groups=x.shape[1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "downsample")
        H, W = x.shape[-2:]
        if H % 2 or W % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {H}x{W}")
        y = F.leaky_relu(self.feature_conv(x), LEAKY_SLOPE)
        return self.filter_step(y)


class UpsampleStage(nn.Module):
    """Zero-interleave, 7x7 depthwise interpolation, low-pass, 1x1 channel map.

    ``mode="bilinear"`` swaps the first two steps for bilinear resizing.
    """

    def __init__(self, in_channels: int, out_channels: int, mode: str = "interleave",
                 use_filter: bool = True, special_init: bool = True, kernel_mode: str = "reshape"):
        super().__init__()
        if mode not in ("interleave", "bilinear"):
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mode = mode
        self.kernel_mode = kernel_mode
        self.factor = 2
        if mode == "interleave":
            self.interp_kernel = nn.Parameter(torch.empty(in_channels, 1, INTERP_SIZE, INTERP_SIZE))
            if special_init:
                with torch.no_grad():
                    self.interp_kernel.copy_(init_interp_kernel().expand_as(self.interp_kernel))
            else:
                nn.init.kaiming_uniform_(self.interp_kernel, a=math.sqrt(5))
        else:
            self.register_parameter("interp_kernel", None)
        if use_filter:
            taps = DEFAULT_TAPS if kernel_mode == "reshape" else KERNEL_SIZE
            self.lowpass = CutoffParams(in_channels, N=taps)
        else:
            self.lowpass = None
        self.channel_map = nn.Conv2d(in_channels, out_channels, 1)

    def interpolate(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "bilinear":
            return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        # same result as conv2d(zero_interleave(x), k, padding=3) without touching the zeros
        k = self.interp_kernel.to(x.dtype).flip(-1, -2)
        H, W = x.shape[-2:]
        y = F.conv_transpose2d(x, k, stride=self.factor, padding=INTERP_SIZE // 2 - 1, groups=x.shape[1])
        return y[..., :self.factor * H, :self.factor * W]

    def filter_step(self, x: torch.Tensor) -> torch.Tensor:
        if self.lowpass is None:
            return x
        k = build_depthwise_kernel(self.lowpass, self.kernel_mode).to(x.dtype)
        return F.conv2d(x, k, padding=KERNEL_SIZE // 2, groups=x.shape[1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "upsample")
        return self.channel_map(self.filter_step(self.interpolate(x)))


def downsample(f: torch.Tensor, stage: DownsampleStage) -> torch.Tensor:
    return stage(f)


# Same contract as ``downsample``; error maps go through their own stage.
downsample_error = downsample


def upsample(p: torch.Tensor, stage: UpsampleStage) -> torch.Tensor:
    return stage(p)
