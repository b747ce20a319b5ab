"""LPIPS-style perceptual distance over a fixed convolutional feature stack.

No pretrained weights are bundled. The default backbone is randomly
initialised from a seed and frozen; ``load_weights`` swaps in weights from a
checkpoint archive.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class FeatureDistance(nn.Module):
    """Three conv stages; distance is the spatially averaged squared difference
    of channel-normalised activations, summed over stages."""

    def __init__(self, in_channels: int = 1, widths=(8, 16, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c = in_channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(c, w, 3, padding=1, stride=1 if i == 0 else 2)
            bound = (6.0 / (9 * c)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            stages.append(conv)
            c = w
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list:
        h = x * 2.0 - 1.0
        feats = []
        for conv in self.stages:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def per_image(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        total = a.new_zeros(a.shape[0])
        for fa, fb in zip(self.features(a), self.features(b)):
            na = fa / (fa.pow(2).sum(dim=1, keepdim=True).add(1e-10).sqrt())
            nb = fb / (fb.pow(2).sum(dim=1, keepdim=True).add(1e-10).sqrt())
            total = total + (na - nb).pow(2).sum(dim=1).mean(dim=(1, 2))
        return total

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Batch-mean distance between image batches (B, C, H, W)."""
        return self.per_image(a, b).mean()

    def forward(self, a, b):
        return self.distance(a, b)

    def load_weights(self, path) -> None:
        from .checkpoint import load_checkpoint

        ckpt = load_checkpoint(path)
        state = {k: v for k, v in ckpt.params.items() if k in self.state_dict()}
        missing = set(self.state_dict()) - set(state)
        if missing:
            raise KeyError(f"backbone archive lacks {sorted(missing)}")
        self.load_state_dict(state)
