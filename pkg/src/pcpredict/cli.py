"""Command-line interface: train, predict, evaluate, gen-data, inspect-filters."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .data import (
    SyntheticSceneSpec,
    gen_bouncing_shapes,
    list_sequence_dirs,
    load_sequence_dir,
    save_sequence_dir,
    to_uint8,
)
from .errors import ConfigError, FormatError, PCPredictError
from .filter_design import ratio_stats
from .metrics import capped_psnr, ssim
from .perceptual import FeatureDistance
from .train import TrainConfig, load_network, train

SEED_ENV = "PCPREDICT_SEED"
GRID_GAP = 2


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcpredict", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--data", type=Path, help="directory of PNG sequences (default: synthetic)")
    t.add_argument("--steps", type=int, help="override the number of updates")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--fusion", choices=["modulate", "add", "concat"])
    t.add_argument("--no-filter", action="store_true", help="drop the learnable low-pass filters")
    t.add_argument("--upsample", choices=["interleave", "bilinear"])
    t.add_argument("--no-special-init", action="store_true", help="random interpolation kernel init")
    t.add_argument("--no-perceptual", action="store_true", help="drop the perceptual loss term")
    t.add_argument("--log-every", type=int, default=0)

    pr = sub.add_parser("predict", help="roll a checkpoint forward from context frames")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--input", type=Path, required=True, help="a sequence directory or a directory of them")
    pr.add_argument("--horizon", type=_positive, required=True)
    pr.add_argument("--context", type=_positive, help="context frames (default: the checkpoint's T1)")
    pr.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("evaluate", help="score predictions against ground truth")
    ev.add_argument("--input", type=Path, required=True, help="ground-truth sequences")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="predict with this checkpoint")
    src.add_argument("--predictions", type=Path, help="precomputed predictions, same layout as --input")
    ev.add_argument("--context", type=_positive, help="context frames (default: the checkpoint's T1)")
    ev.add_argument("--out", type=Path, required=True)

    g = sub.add_parser("gen-data", help="write synthetic bouncing-shape sequences as PNGs")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n", type=_positive, default=1, help="number of sequences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=_positive, default=10)
    g.add_argument("--size", type=_positive, default=64, help="frame height and width")
    g.add_argument("--shapes", type=_positive, default=1)
    g.add_argument("--kinds", default="square", help="comma-separated: square,disc")

    i = sub.add_parser("inspect-filters", help="per-level cutoff ratio statistics as CSV")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--out", type=Path, help="also write the CSV here")
    return p


# -- subcommands -------------------------------------------------------------------------------


def _load_sequences(path: Path) -> list[tuple[str, torch.Tensor]]:
    return [(d.name, load_sequence_dir(d)) for d in list_sequence_dirs(path)]


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config).to_dict() if args.config else TrainConfig().to_dict()
    overrides = {
        "steps": args.steps,
        "fusion": args.fusion,
        "upsample": args.upsample,
        "use_filter": False if args.no_filter else None,
        "special_init": False if args.no_special_init else None,
        "perceptual": False if args.no_perceptual else None,
        "seed": _env_seed(),
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(cfg)

    dataset = None
    if args.data is not None:
        seqs = [s for _, s in _load_sequences(args.data)]
        if len({tuple(s.shape) for s in seqs}) != 1:
            raise FormatError(f"sequences under {args.data} differ in shape")
        dataset = torch.stack(seqs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    result = train(config, dataset, out_dir=args.out, resume=str(args.resume) if args.resume else None,
                   log_every=args.log_every)
    print(result.checkpoint)
    return 0


def _context_length(args, ckpt) -> int:
    if args.context is not None:
        return args.context
    return int(ckpt.config["network"]["T1"])


def _grid(rows: Sequence[Sequence[Optional[torch.Tensor]]], shape) -> np.ndarray:
    """Tile frames row by row; ``None`` cells stay black."""
    C, H, W = shape
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    canvas = np.zeros((n_rows * H + (n_rows - 1) * GRID_GAP, n_cols * W + (n_cols - 1) * GRID_GAP)
                      + ((3,) if C == 3 else ()), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, frame in enumerate(row):
            if frame is None:
                continue
            y, x = i * (H + GRID_GAP), j * (W + GRID_GAP)
            canvas[y:y + H, x:x + W] = to_uint8(frame)
    return canvas


def cmd_predict(args) -> int:
    network, ckpt = load_network(args.checkpoint)
    network.eval()
    T1 = _context_length(args, ckpt)
    (args.out / "grids").mkdir(parents=True, exist_ok=True)
    for name, seq in _load_sequences(args.input):
        if seq.shape[0] < T1:
            raise FormatError(f"sequence {name} has {seq.shape[0]} frames, need {T1} context frames")
        if tuple(seq.shape[1:]) != network.config.image_shape:
            raise FormatError(f"sequence {name} frames are {tuple(seq.shape[1:])}, "
                              f"checkpoint expects {network.config.image_shape}")
        preds = network.predict(seq[None, :T1], args.horizon)[0]
        save_sequence_dir(preds, args.out / name, prefix="pred")
        truth = [seq[T1 + k] if T1 + k < seq.shape[0] else None for k in range(args.horizon)]
        grid = _grid([truth, list(preds)], network.config.image_shape)
        Image.fromarray(grid).save(args.out / "grids" / f"{name}.png")
    return 0


def cmd_evaluate(args) -> int:
    truth = _load_sequences(args.input)
    backbone = None
    if args.checkpoint is not None:
        network, ckpt = load_network(args.checkpoint)
        network.eval()
        T1 = _context_length(args, ckpt)
        preds = {}
        for name, seq in truth:
            if seq.shape[0] <= T1:
                raise FormatError(f"sequence {name} has no frames after the {T1} context frames")
            preds[name] = network.predict(seq[None, :T1], seq.shape[0] - T1)[0]
    else:
        preds = dict(_load_sequences(args.predictions))
        missing = [name for name, _ in truth if name not in preds]
        if missing:
            raise FormatError(f"no predictions for sequences {missing}")

    rows = []
    for name, seq in truth:
        pred = preds[name]
        K = pred.shape[0]
        if K > seq.shape[0]:
            raise FormatError(f"sequence {name}: {K} predictions but only {seq.shape[0]} frames")
        if backbone is None:
            backbone = FeatureDistance(in_channels=seq.shape[1])
        # predictions line up with the last K ground-truth frames
        start = seq.shape[0] - K
        for k in range(K):
            gt = seq[start + k]
            rows.append({
                "sequence_id": name,
                "t": start + k,
                "ssim": ssim(pred[k], gt),
                "psnr": capped_psnr(pred[k], gt),
                "perceptual": backbone.distance(pred[k][None], gt[None]).item(),
            })

    metrics = ("ssim", "psnr", "perceptual")
    summary = []
    for name, _ in truth:
        mine = [r for r in rows if r["sequence_id"] == name]
        summary.append({"sequence_id": name, "t": "mean",
                        **{m: float(np.mean([r[m] for r in mine])) for m in metrics}})
    summary.append({"sequence_id": "all", "t": "mean",
                    **{m: float(np.mean([r[m] for r in rows])) for m in metrics}})

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sequence_id", "t", *metrics])
        writer.writeheader()
        writer.writerows(rows + summary)
    overall = summary[-1]
    print(f"ssim={overall['ssim']:.4f} psnr={overall['psnr']:.2f} perceptual={overall['perceptual']:.4f}")
    return 0


def cmd_gen_data(args) -> int:
    seed = _env_seed()
    seed = args.seed if seed is None else seed
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    bad = [k for k in kinds if k not in ("square", "disc")]
    if bad or not kinds:
        raise ConfigError(f"unknown shape kinds {bad or args.kinds!r}")
    for i in range(args.n):
        spec = SyntheticSceneSpec(seed=seed + i, n_shapes=args.shapes, kinds=kinds, H=args.size,
                                  W=args.size, T=args.frames)
        save_sequence_dir(gen_bouncing_shapes(spec), args.out / f"seq_{i:04d}")
    return 0


def cmd_inspect_filters(args) -> int:
    network, _ = load_network(args.checkpoint)
    groups = network.cutoff_levels()
    if not any(groups):
        raise ConfigError("checkpoint was trained without learnable filters")
    lines = ["level,mean,std"]
    for level, group in enumerate(groups):
        if group:
            mean, std = ratio_stats([group])[0]
            lines.append(f"{level},{mean:.6f},{std:.6f}")
        else:
            lines.append(f"{level},,")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    return 0


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gen-data": cmd_gen_data,
    "inspect-filters": cmd_inspect_filters,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed its message; --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and args.config is not None and not args.config.is_file():
        print(f"pcpredict train: error: config file {args.config} not found", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (PCPredictError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"pcpredict {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
