"""Versioned binary checkpoints: config text followed by a named float32 tensor table.

Layout (all integers little-endian)::

    magic b"RAYDIFF\\0" | u32 version | u32 config length | config utf-8
    u32 tensor count | per tensor: u32 name length, name, u32 ndim,
    ndim x u64 dims, u64 element count, element count x f32
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RAYDIFF\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def format_config(entries: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(entries.items()))


def parse_config(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def encode(tensors: dict[str, torch.Tensor], config: dict, allow_nonfinite: bool = False) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = format_config(config).encode()
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        if not allow_nonfinite and not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name} has non-finite values")
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts += [struct.pack("<Q", arr.size), arr.astype("<f4").tobytes()]
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict[str, torch.Tensor], dict]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = parse_config(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (size,) = struct.unpack("<Q", take(8))
        if int(np.prod(shape, dtype=np.int64)) != size:
            raise CheckpointError(f"{source}: tensor {name} shape {shape} disagrees with length {size}")
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CheckpointError(f"{source}: trailing bytes after tensor table")
    return tensors, config


def save_checkpoint(path, model: torch.nn.Module, config: dict, allow_nonfinite: bool = False) -> Path:
    """``allow_nonfinite`` is for diagnostic snapshots of a diverged run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(dict(model.state_dict()), config, allow_nonfinite))
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    return decode(data, str(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
