"""Convolutional LSTM cell (no peepholes)."""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .errors import ShapeError


class CellState(NamedTuple):
    c: torch.Tensor
    h: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int,
              dtype: torch.dtype = torch.float32) -> "CellState":
        z = torch.zeros(batch, channels, height, width, dtype=dtype)
        return cls(z, z.clone())


class ConvLSTMCell(nn.Module):
    """Gates i, f, o, g from one 3x3 conv over ``cat(input, h)``.

    ``h = o * tanh(c)`` is also the cell output.
    """

    def __init__(self, in_channels: int, hidden_channels: int, forget_bias: float = 1.0,
                 init_scale: Optional[float] = 0.1):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)
        if init_scale is not None:
            nn.init.uniform_(self.gates.weight, -init_scale, init_scale)
        nn.init.zeros_(self.gates.bias)
        with torch.no_grad():
            self.gates.bias[hidden_channels:2 * hidden_channels].fill_(forget_bias)

    def forward(self, x: torch.Tensor, state: CellState) -> tuple[torch.Tensor, CellState]:
        c_prev, h_prev = state
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"ConvLSTM input: expected {self.in_channels} channels, got {tuple(x.shape)}")
        if c_prev.shape != h_prev.shape:
            raise ShapeError("ConvLSTM state: c and h shapes differ")
        if h_prev.shape[1] != self.hidden_channels or h_prev.shape[-2:] != x.shape[-2:] \
                or h_prev.shape[0] != x.shape[0]:
            raise ShapeError(f"ConvLSTM state shape {tuple(h_prev.shape)} does not fit input {tuple(x.shape)}")
        z = self.gates(torch.cat([x, h_prev], dim=1))
        i, f, o, g = torch.chunk(z, 4, dim=1)
        c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, CellState(c, h)


def conv_lstm_step(f_in: torch.Tensor, state: CellState, cell: ConvLSTMCell):
    return cell(f_in, state)
