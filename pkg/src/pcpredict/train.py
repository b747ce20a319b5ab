"""Training loop, checkpoint plumbing and held-out evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SyntheticSceneSpec, gen_dataset
from .errors import ConfigError, NumericError
from .losses import LossWeights, compute_losses
from .metrics import mse, ssim
from .network import NetworkConfig, PCNetwork, write_diagnostics_csv
from .perceptual import FeatureDistance

log = logging.getLogger(__name__)

OPTIM_PREFIX = "optim."


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    # "constant" keeps lr; "cosine" anneals from lr to lr_min over `steps`
    lr_schedule: str = "constant"
    lr_min: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    T1: int = 5
    T2: int = 5
    perceptual: bool = True
    use_filter: bool = True
    fusion: str = "modulate"
    upsample: str = "interleave"
    special_init: bool = True
    error_mode: str = "rectified"
    kernel_mode: str = "reshape"
    channels: tuple = (1, 16, 32)
    image_shape: tuple = (1, 64, 64)
    seed: int = 0
    grad_clip: Optional[float] = None
    checkpoint_every: int = 0
    perceptual_seed: int = 0
    # synthetic data, used when no dataset directory is given
    n_train: int = 64
    data_seed: int = 1000
    n_shapes: int = 1
    kinds: tuple = ("square",)
    size_range: tuple = (10, 16)
    velocity_range: tuple = (1.0, 3.0)
    intensity_range: tuple = (0.6, 1.0)

    def __post_init__(self):
        for name in ("channels", "image_shape", "kinds", "size_range", "velocity_range", "intensity_range"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not (self.lr > 0) or not (self.lr_min > 0):
            raise ConfigError("learning rates must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(channels=self.channels, image_shape=self.image_shape, T1=self.T1, T2=self.T2,
                             fusion=self.fusion, use_filter=self.use_filter, upsample=self.upsample,
                             special_init=self.special_init, error_mode=self.error_mode,
                             kernel_mode=self.kernel_mode)

    def scene_spec(self, seed: Optional[int] = None) -> SyntheticSceneSpec:
        _, H, W = self.image_shape
        return SyntheticSceneSpec(seed=self.data_seed if seed is None else seed, n_shapes=self.n_shapes,
                                  kinds=self.kinds, H=H, W=W, T=self.T1 + self.T2,
                                  size_range=self.size_range, velocity_range=self.velocity_range,
                                  intensity_range=self.intensity_range)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    network: PCNetwork
    optimizer: torch.optim.Optimizer
    curve: list = field(default_factory=list)
    checkpoint: Optional[Path] = None


def build_network(config: TrainConfig) -> PCNetwork:
    torch.manual_seed(config.seed)
    return PCNetwork(config.network_config())


def make_optimizer(network: PCNetwork, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(network.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                            eps=config.eps)


def make_backbone(config: TrainConfig) -> Optional[FeatureDistance]:
    if not config.perceptual:
        return None
    return FeatureDistance(in_channels=config.image_shape[0], seed=config.perceptual_seed)


def synthetic_dataset(config: TrainConfig) -> torch.Tensor:
    return gen_dataset(config.scene_spec(), config.n_train)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Learning rate for the update made at 0-based ``step``."""
    if config.lr_schedule == "constant" or config.steps <= 1:
        return config.lr
    frac = min(step, config.steps - 1) / (config.steps - 1)
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1 + math.cos(math.pi * frac))


def batch_indices(config: TrainConfig, step: int, n: int) -> np.ndarray:
    # derived from (seed, step) alone so resumed runs draw the same batches
    rng = np.random.default_rng([config.seed, step])
    return rng.choice(n, size=config.batch_size, replace=n < config.batch_size)


def state_entries(network: PCNetwork, optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    entries = dict(network.state_dict())
    if optimizer is not None:
        for name, p in network.named_parameters():
            st = optimizer.state.get(p)
            if not st:
                continue
            for key, val in st.items():
                entries[f"{OPTIM_PREFIX}{name}.{key}"] = torch.as_tensor(val)
    return entries


def save_training_state(path, network, optimizer, config: TrainConfig, step: int) -> Path:
    snapshot = {"train": config.to_dict(), "network": network.config.to_dict()}
    return save_checkpoint(state_entries(network, optimizer), path, snapshot, step)


def load_network(path) -> tuple[PCNetwork, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "network" not in ckpt.config:
        raise ConfigError(f"{path}: checkpoint has no network config")
    net = PCNetwork(NetworkConfig.from_dict(ckpt.config["network"]))
    model_state = {k: v for k, v in ckpt.params.items() if not k.startswith(OPTIM_PREFIX)}
    net.load_state_dict(model_state)
    return net, ckpt


def restore_optimizer(optimizer, network: PCNetwork, ckpt: Checkpoint) -> None:
    for name, p in network.named_parameters():
        prefix = f"{OPTIM_PREFIX}{name}."
        st = {k[len(prefix):]: v.clone() for k, v in ckpt.params.items() if k.startswith(prefix)}
        if st:
            optimizer.state[p] = st


def loss_for_batch(network: PCNetwork, batch: torch.Tensor, weights: LossWeights, backbone, T1: int):
    mode = "closed_loop" if batch.shape[1] > T1 else "teacher_forced"
    result = network.rollout(batch, T1=T1, mode=mode)
    return compute_losses(result, weights, backbone), result


def train(config: TrainConfig, dataset: Optional[torch.Tensor] = None, out_dir=None,
          resume: Optional[str] = None, log_every: int = 0) -> TrainResult:
    """Fit the network on ``dataset`` (N, T, C, H, W) for ``config.steps`` updates.

    The curve row for step ``k`` holds the loss evaluated with the parameters
    of the step ``k - 1`` checkpoint, i.e. just before the k-th update.
    """
    if dataset is None:
        dataset = synthetic_dataset(config)
    if dataset.dim() != 5 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, T, C, H, W) tensor")
    T = config.T1 + config.T2
    if dataset.shape[1] < T:
        raise ValueError(f"sequences have {dataset.shape[1]} frames, need {T}")
    dataset = dataset[:, :T]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    network = build_network(config)
    optimizer = make_optimizer(network, config)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        network.load_state_dict({k: v for k, v in ckpt.params.items() if not k.startswith(OPTIM_PREFIX)})
        restore_optimizer(optimizer, network, ckpt)
        start = ckpt.step
    backbone = make_backbone(config)
    weights = LossWeights.build(config.T1, config.T2, network.config.L, config.image_shape)

    curve = []
    ckpt_path = None
    for step in range(start, config.steps):
        batch = dataset[torch.as_tensor(batch_indices(config, step, dataset.shape[0]))]
        report, result = loss_for_batch(network, batch, weights, backbone, config.T1)
        row = {"step": step + 1, **report.as_floats()}
        if not math.isfinite(row["Ltotal"]):
            _dump_failure(out_dir, network, batch, config)
            raise NumericError(f"non-finite loss at step {step + 1}: {row}")
        curve.append(row)
        optimizer.zero_grad(set_to_none=True)
        report.L_total.backward()
        for group in optimizer.param_groups:
            group["lr"] = learning_rate(config, step)
        if config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(network.parameters(), config.grad_clip)
        optimizer.step()
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d  L1=%.4f L2=%.4f Llpips=%.5f total=%.4f", step + 1, row["L1"], row["L2"],
                     row["Llpips"], row["Ltotal"])
        if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_training_state(out_dir / f"step_{step + 1:06d}.pcpk", network, optimizer, config, step + 1)

    if out_dir is not None:
        ckpt_path = save_training_state(out_dir / "final.pcpk", network, optimizer, config,
                                        max(config.steps, start))
        write_curve_csv(curve, out_dir / "curve.csv")
    return TrainResult(network, optimizer, curve, ckpt_path)


def _dump_failure(out_dir, network, batch, config) -> None:
    if out_dir is None:
        return
    try:
        with torch.no_grad():
            result = network.rollout(batch, T1=config.T1, mode="teacher_forced", record=True)
        write_diagnostics_csv(result.diagnostics, out_dir / "failure_diagnostics.csv")
    except Exception as exc:  # the rollout itself may be what blew up
        (out_dir / "failure_diagnostics.txt").write_text(repr(exc))


def write_curve_csv(curve: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "L1", "L2", "Llpips", "Ltotal"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


@torch.no_grad()
def evaluate_sequence(network: PCNetwork, seq: torch.Tensor, T1: int) -> dict:
    """Closed-loop rollout of one (T, C, H, W) sequence against the copy-last-frame baseline.

    ``mse_*`` averages over the closed-loop frames ``T1..T-1``; ``ssim_*``
    averages over every next-frame prediction of the rollout. The baseline
    predicts ``x_t`` for ``x_{t+1}`` while ground truth is fed and keeps
    repeating ``x_{T1-1}`` once it has to run on its own output.
    """
    T = seq.shape[0]
    result = network.rollout(seq.unsqueeze(0), T1=T1, mode="closed_loop")
    preds = result.predictions[0].clamp(0, 1)
    baseline = torch.stack([seq[min(t, T1 - 1)] for t in range(T - 1)])
    targets = seq[1:]
    closed = range(T1 - 1, T - 1)
    return {
        "mse_model": float(np.mean([mse(preds[i], targets[i]) for i in closed])),
        "mse_baseline": float(np.mean([mse(baseline[i], targets[i]) for i in closed])),
        "ssim_model": float(np.mean([ssim(preds[i], targets[i]) for i in range(T - 1)])),
        "ssim_baseline": float(np.mean([ssim(baseline[i], targets[i]) for i in range(T - 1)])),
    }
