"""Synthetic bouncing-shape sequences and PNG sequence I/O.

Sequences are float tensors of shape (T, C, H, W) with values in [0, 1].
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import FormatError

IMAGE_SUFFIXES = (".png",)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    n_shapes: int = 1
    kinds: tuple = ("square",)
    H: int = 64
    W: int = 64
    T: int = 10
    size_range: tuple = (10, 16)
    velocity_range: tuple = (1.0, 3.0)
    intensity_range: tuple = (0.6, 1.0)


@dataclass
class Shape:
    kind: str
    size: int
    position: tuple        # (x, y) of the top-left corner
    velocity: tuple        # (vx, vy) in pixels per frame
    intensity: float = 1.0


def _reflect(p: float, v: float, hi: float) -> tuple[float, float]:
    # bounce inside [0, hi]; loops for velocities larger than the box
    while p < 0 or p > hi:
        if p < 0:
            p, v = -p, -v
        if p > hi:
            p, v = 2 * hi - p, -v
    return p, v


def _draw(canvas: np.ndarray, shape: Shape, x: float, y: float) -> None:
    H, W = canvas.shape
    s = shape.size
    x0, y0 = int(round(x)), int(round(y))
    if shape.kind == "square":
        canvas[y0:y0 + s, x0:x0 + s] = np.maximum(canvas[y0:y0 + s, x0:x0 + s], shape.intensity)
    elif shape.kind == "disc":
        yy, xx = np.mgrid[0:H, 0:W]
        r = s / 2.0
        mask = (xx + 0.5 - (x + r)) ** 2 + (yy + 0.5 - (y + r)) ** 2 <= r * r
        canvas[mask] = np.maximum(canvas[mask], shape.intensity)
    else:
        raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_shapes(shapes: Sequence[Shape], H: int, W: int, T: int) -> torch.Tensor:
    """Move every shape at constant velocity for ``T`` frames, reflecting at the borders."""
    frames = np.zeros((T, 1, H, W), dtype=np.float32)
    state = [(float(s.position[0]), float(s.position[1]), float(s.velocity[0]), float(s.velocity[1]))
             for s in shapes]
    for t in range(T):
        for i, shp in enumerate(shapes):
            x, y, vx, vy = state[i]
            _draw(frames[t, 0], shp, x, y)
            x, vx = _reflect(x + vx, vx, W - shp.size)
            y, vy = _reflect(y + vy, vy, H - shp.size)
            state[i] = (x, y, vx, vy)
    return torch.from_numpy(frames)


def sample_shapes(spec: SyntheticSceneSpec) -> list[Shape]:
    if spec.n_shapes < 1:
        raise ValueError("need at least one shape")
    if spec.H < 16 or spec.W < 16 or spec.T < 2:
        raise ValueError("need H, W >= 16 and T >= 2")
    rng = np.random.default_rng(spec.seed)
    shapes = []
    for _ in range(spec.n_shapes):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        speed = rng.uniform(*spec.velocity_range)
        angle = rng.uniform(0, 2 * np.pi)
        shapes.append(Shape(
            kind=kind,
            size=size,
            position=(rng.uniform(0, spec.W - size), rng.uniform(0, spec.H - size)),
            velocity=(speed * np.cos(angle), speed * np.sin(angle)),
            intensity=float(rng.uniform(*spec.intensity_range)),
        ))
    return shapes


def gen_bouncing_shapes(spec: SyntheticSceneSpec) -> torch.Tensor:
    return render_shapes(sample_shapes(spec), spec.H, spec.W, spec.T)


def gen_dataset(base: SyntheticSceneSpec, n: int, seed_offset: int = 0) -> torch.Tensor:
    """``n`` sequences with seeds ``base.seed + seed_offset + i``; shape (n, T, 1, H, W)."""
    seqs = [gen_bouncing_shapes(_with_seed(base, base.seed + seed_offset + i)) for i in range(n)]
    return torch.stack(seqs)


def _with_seed(spec: SyntheticSceneSpec, seed: int) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(**{**spec.__dict__, "seed": seed})


def load_sequence_dir(path) -> torch.Tensor:
    """Load lexicographically ordered PNG frames as a (T, C, H, W) tensor in [0, 1]."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FormatError(f"no PNG frames in {path}")
    frames = []
    for p in files:
        try:
            with Image.open(p) as im:
                im.load()
                if im.mode in ("1", "L", "LA"):
                    arr = np.asarray(im.convert("L"))[None]
                else:
                    arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read frame {p}: {exc}") from exc
        frames.append(arr)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"frames in {path} have mixed shapes: {sorted(shapes)}")
    return torch.from_numpy(np.stack(frames).astype(np.float32) / 255.0)


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    arr = frame.detach().double().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_frame(frame: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(frame)).save(path)


def save_sequence_dir(seq: torch.Tensor, path, prefix: str = "frame") -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for t in range(seq.shape[0]):
        p = path / f"{prefix}_{t:03d}.png"
        save_frame(seq[t], p)
        out.append(p)
    return out


def list_sequence_dirs(path) -> list[Path]:
    """A directory of frames is one sequence; otherwise each subdirectory is one."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    if any(p.suffix.lower() in IMAGE_SUFFIXES for p in path.iterdir()):
        return [path]
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not subdirs:
        raise FormatError(f"no sequences found under {path}")
    return subdirs
