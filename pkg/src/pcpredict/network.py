"""Hierarchical predictive-coding network for next-frame prediction.

Per step and level ``l`` (``f_0 = x_t``):

* bottom-up: ``f_l = DS_f(f_{l-1})`` from the *same* frame, errors
  ``E_l = [relu(f_l - P_l^{t-1}); relu(P_l^{t-1} - f_l)]`` merged with the
  downsampled lower-level error. Errors never enter ``f``.
* recurrent: ``f_in = ModError(f_l, E_l)``, ``f_out = ConvLSTM(f_in)``.
* top-down: ``P_{L-1} = f_out``, ``P_l = ModPred(US(P_{l+1}), f_out)``.

``P_0^t`` is the prediction of frame ``t + 1``.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError, StateError
from .filter_design import CutoffParams
from .modulation import make_fusion
from .recurrent import CellState, ConvLSTMCell
from .resample import DownsampleStage, UpsampleStage


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple = (1, 16, 32)
    image_shape: tuple = (1, 64, 64)
    T1: int = 5
    T2: int = 5
    fusion: str = "modulate"
    use_filter: bool = True
    upsample: str = "interleave"
    special_init: bool = True
    error_mode: str = "rectified"
    kernel_mode: str = "reshape"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        c, h, w = self.image_shape
        if self.L < 2:
            raise ConfigError("need at least 2 levels")
        if self.channels[0] != c:
            raise ConfigError(f"channels[0]={self.channels[0]} must equal the frame channels {c}")
        step = 2 ** (self.L - 1)
        if h % step or w % step:
            raise ConfigError(f"{h}x{w} frames are not divisible by {step}")
        if self.T1 < 1 or self.T2 < 0:
            raise ConfigError("need T1 >= 1 and T2 >= 0")
        if self.error_mode not in ("rectified", "absolute"):
            raise ConfigError(f"unknown error mode {self.error_mode!r}")

    @property
    def L(self) -> int:
        return len(self.channels)

    @property
    def T(self) -> int:
        return self.T1 + self.T2

    def level_shape(self, level: int) -> tuple:
        _, h, w = self.image_shape
        return self.channels[level], h >> level, w >> level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LevelState:
    cell: CellState
    last_prediction: torch.Tensor


@dataclass
class StepDiagnostics:
    """Detached per-level snapshots of one step.

    ``E`` holds the local rectified errors; ``E_merged`` what the level
    actually consumed after adding the lower-level error.
    """
    t: int
    f: list
    E: list
    E_merged: list
    P: list
    error_norms: list


@dataclass
class RolloutResult:
    predictions: torch.Tensor          # (B, T-1, C, H, W): P_0^0 .. P_0^{T-2}
    features: list                     # features[t][l] = f_l^t of ground-truth frames
    level_predictions: list            # level_predictions[t][l] = P_l^t
    predicted_features: dict           # t -> [f_hat_l^t], closed-loop steps only
    inputs: torch.Tensor
    T1: int
    diagnostics: list = field(default_factory=list)


def compute_error(f: torch.Tensor, p_prev: torch.Tensor, mode: str = "rectified") -> torch.Tensor:
    """Channel-concatenated positive and negative parts of ``f - p_prev``."""
    if f.shape != p_prev.shape:
        raise ShapeError(f"error inputs disagree: {tuple(f.shape)} vs {tuple(p_prev.shape)}")
    d = f - p_prev
    if mode == "rectified":
        return torch.cat([F.relu(d), F.relu(-d)], dim=1)
    if mode == "absolute":
        return torch.cat([d.abs(), d.abs()], dim=1)
    raise ValueError(f"unknown error mode {mode!r}")


def merge_errors(e_local: torch.Tensor, e_below_ds: Optional[torch.Tensor],
                 alpha_e=1.0, beta_e=1.0) -> torch.Tensor:
    """``alpha * E_local + beta * DS_E(E_below)``; level 0 passes ``E_local`` through."""
    if e_below_ds is None:
        return e_local
    if e_local.shape != e_below_ds.shape:
        raise ShapeError(f"error maps disagree: {tuple(e_local.shape)} vs {tuple(e_below_ds.shape)}")
    return alpha_e * e_local + beta_e * e_below_ds


class PCNetwork(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        L = config.L
        self.ds_f = nn.ModuleList(
            DownsampleStage(ch[l - 1], ch[l], config.use_filter, config.kernel_mode) for l in range(1, L))
        # bias-free so that a zero error map stays zero on its way up
        self.ds_e = nn.ModuleList(
            DownsampleStage(2 * ch[l - 1], 2 * ch[l], config.use_filter, config.kernel_mode, bias=False)
            for l in range(1, L))
        # us[l] maps level l+1 predictions down to level l
        self.us = nn.ModuleList(
            UpsampleStage(ch[l + 1], ch[l], config.upsample, config.use_filter, config.special_init,
                          config.kernel_mode)
            for l in range(L - 1))
        self.mod_error = nn.ModuleList(make_fusion(config.fusion, ch[l], 2 * ch[l]) for l in range(L))
        self.cells = nn.ModuleList(ConvLSTMCell(ch[l], ch[l]) for l in range(L))
        self.mod_pred = nn.ModuleList(make_fusion(config.fusion, ch[l], ch[l]) for l in range(L - 1))
        # error-merge coefficients for levels 1..L-1
        self.alpha_e = nn.Parameter(torch.ones(L - 1))
        self.beta_e = nn.Parameter(torch.ones(L - 1))

    @property
    def dtype(self) -> torch.dtype:
        return self.alpha_e.dtype

    def init_states(self, batch: int) -> list:
        states = []
        for l in range(self.config.L):
            shape = (batch,) + self.config.level_shape(l)
            states.append(LevelState(CellState.zeros(*shape, dtype=self.dtype),
                                     torch.zeros(shape, dtype=self.dtype)))
        return states

    def encode(self, x: torch.Tensor) -> list:
        """Sensory inputs ``[f_0, ..., f_{L-1}]`` of one frame batch."""
        c, h, w = self.config.image_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"expected frames of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")
        feats = [x]
        for stage in self.ds_f:
            feats.append(stage(feats[-1]))
        return feats

    def cutoff_levels(self) -> list:
        """Cutoff parameters grouped by the level whose features they filter."""
        L = self.config.L
        groups = [[] for _ in range(L)]
        for l in range(1, L):
            for stage in (self.ds_f[l - 1], self.ds_e[l - 1]):
                if stage.lowpass is not None:
                    groups[l].append(stage.lowpass)
        for l in range(L - 1):
            if self.us[l].lowpass is not None:
                groups[l].append(self.us[l].lowpass)
        return groups

    def step(self, x_t: torch.Tensor, states: Optional[Sequence[LevelState]], t: int = 0,
             features: Optional[list] = None, record: bool = False):
        """Advance one timestep. Returns ``(P_0^t, new_states, diagnostics)``.

        ``features`` lets a caller pass precomputed ``encode(x_t)``.
        """
        L = self.config.L
        if states is None or len(states) != L or any(s is None for s in states):
            raise StateError("level states are not initialised; call init_states() first")
        f = self.encode(x_t) if features is None else features

        local, errors = [], []
        for l in range(L):
            e = compute_error(f[l], states[l].last_prediction, self.config.error_mode)
            local.append(e)
            if l > 0:
                e = merge_errors(e, self.ds_e[l - 1](errors[-1]), self.alpha_e[l - 1], self.beta_e[l - 1])
            errors.append(e)

        outs, cells = [], []
        for l in range(L):
            f_in = self.mod_error[l](f[l], errors[l])
            out, cs = self.cells[l](f_in, states[l].cell)
            outs.append(out)
            cells.append(cs)

        preds = [None] * L
        preds[L - 1] = outs[L - 1]
        for l in range(L - 2, -1, -1):
            preds[l] = self.mod_pred[l](self.us[l](preds[l + 1]), outs[l])
        for l, p in enumerate(preds):
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite prediction at level {l}, timestep {t}")

        new_states = [LevelState(cells[l], preds[l]) for l in range(L)]
        diag = None
        if record:
            diag = StepDiagnostics(
                t=t,
                f=[v.detach().clone() for v in f],
                E=[e.detach().clone() for e in local],
                E_merged=[e.detach().clone() for e in errors],
                P=[p.detach().clone() for p in preds],
                error_norms=[e.detach().double().norm().item() for e in local],
            )
        return preds[0], new_states, diag

    def rollout(self, seq: torch.Tensor, T1: Optional[int] = None, mode: str = "closed_loop",
                record: bool = False) -> RolloutResult:
        """Run over ``seq`` of shape (B, T, C, H, W).

        Steps ``t < T1`` read ground truth. In closed-loop mode later steps read
        ``clamp(P_0^{t-1}, 0, 1)`` and the ground-truth frame is still encoded
        for the losses.
        """
        T1 = self.config.T1 if T1 is None else T1
        if seq.dim() != 5:
            raise ShapeError(f"expected a (B, T, C, H, W) sequence, got {tuple(seq.shape)}")
        T = seq.shape[1]
        if mode not in ("teacher_forced", "closed_loop"):
            raise ValueError(f"unknown rollout mode {mode!r}")
        if T < 2 or T < T1 or (T == T1 and mode == "closed_loop") or (T1 < 1):
            raise ValueError(f"sequence of length {T} is too short for T1={T1} in {mode} mode")

        states = self.init_states(seq.shape[0])
        features, level_preds, predicted_features, diags = [], [], {}, []
        prev_frame = None
        for t in range(T):
            gt = self.encode(seq[:, t])
            features.append(gt)
            if mode == "closed_loop" and t >= T1:
                fed = self.encode(prev_frame.clamp(0.0, 1.0))
                predicted_features[t] = fed
            else:
                fed = gt
            p0, states, diag = self.step(seq[:, t], states, t=t, features=fed, record=record)
            level_preds.append([s.last_prediction for s in states])
            prev_frame = p0
            if diag is not None:
                diags.append(diag)
        predictions = torch.stack([level_preds[t][0] for t in range(T - 1)], dim=1)
        return RolloutResult(predictions, features, level_preds, predicted_features, seq, T1, diags)

    @torch.no_grad()
    def predict(self, context: torch.Tensor, horizon: int) -> torch.Tensor:
        """Consume ``context`` (B, T1, C, H, W) then predict ``horizon`` frames in closed loop."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        states = self.init_states(context.shape[0])
        p0 = None
        for t in range(context.shape[1]):
            p0, states, _ = self.step(context[:, t], states, t=t)
        out = []
        for k in range(horizon):
            frame = p0.clamp(0.0, 1.0)
            out.append(frame)
            if k + 1 < horizon:
                p0, states, _ = self.step(frame, states, t=context.shape[1] + k)
        return torch.stack(out, dim=1)


def step(x_t: torch.Tensor, levels: Sequence[LevelState], network: PCNetwork, t: int = 0):
    return network.step(x_t, levels, t=t, record=True)


def rollout(seq: torch.Tensor, network: PCNetwork, mode: str = "closed_loop", T1: Optional[int] = None,
            record: bool = False) -> RolloutResult:
    return network.rollout(seq, T1=T1, mode=mode, record=record)


def trace_dependency(result: RolloutResult, level: int, timestep: int, tol: float = 0.0) -> dict:
    """Which input frames the ground-truth features ``f_level^timestep`` depend on.

    Needs a rollout whose ``inputs`` require grad. Dependence is measured by
    the gradient of a fixed random projection of the features.
    """
    if not result.inputs.requires_grad:
        raise StateError("rollout inputs do not require grad; rerun with inputs.requires_grad_()")
    if not (0 <= timestep < len(result.features)) or not (0 <= level < len(result.features[0])):
        raise StateError(f"no features recorded for level {level}, timestep {timestep}")
    feat = result.features[timestep][level]
    gen = torch.Generator().manual_seed(1234)
    proj = torch.rand(feat.shape, generator=gen, dtype=feat.dtype) + 0.5
    (grad,) = torch.autograd.grad((feat * proj).sum(), result.inputs, retain_graph=True,
                                  allow_unused=True)
    if grad is None:
        sources = []
    else:
        per_frame = grad.abs().flatten(2).amax(dim=2).amax(dim=0)
        sources = [int(i) for i in torch.nonzero(per_frame > tol).flatten()]
    return {
        "level": level,
        "timestep": timestep,
        "source_frames": sources,
        "lag": timestep - max(sources) if sources else None,
    }


def write_diagnostics_csv(diagnostics: Sequence[StepDiagnostics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "t", "error_norm"])
        for d in diagnostics:
            for l, norm in enumerate(d.error_norms):
                writer.writerow([l, d.t, repr(norm)])


def cutoff_param_list(network: PCNetwork) -> list[CutoffParams]:
    return [m for m in network.modules() if isinstance(m, CutoffParams)]
