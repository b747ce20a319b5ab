"""Checkpoint archive: named little-endian tensors plus a config snapshot.

Layout::

    b"PCPK1"                      magic
    u32  version
    u64  step
    u32  n, then n bytes of UTF-8 JSON config
    u32  entry count
    per entry:
      u16 name length, name (UTF-8)
      u8  dtype tag length, tag (numpy style, e.g. "<f4")
      u8  ndim, then ndim x u64 dims
      u64 byte count, raw values
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import FormatError, TruncatedFileError

MAGIC = b"PCPK1"
VERSION = 1


@dataclass
class Checkpoint:
    params: "OrderedDict[str, torch.Tensor]"
    config: dict = field(default_factory=dict)
    step: int = 0


def _to_le_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(params: Mapping[str, torch.Tensor], path, config: dict | None = None,
                    step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, step), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        arr = _to_le_array(tensor)
        name_b = name.encode("utf-8")
        tag = arr.dtype.str.encode("ascii")
        chunks += [struct.pack("<H", len(name_b)), name_b,
                   struct.pack("<B", len(tag)), tag,
                   struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
                   struct.pack("<Q", arr.nbytes), arr.tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: archive truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint archive (bad magic)")
    version, step = r.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt config block") from exc
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (n,) = r.unpack("<B")
        tag = r.take(n).decode("ascii")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        try:
            dtype = np.dtype(tag)
        except TypeError as exc:
            raise FormatError(f"{path}: unknown dtype tag {tag!r} for {name}") from exc
        if dtype.itemsize * int(np.prod(shape, dtype=np.int64)) != nbytes:
            raise FormatError(f"{path}: entry {name} size does not match its shape")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        params[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after last entry")
    return Checkpoint(params, config, step)
