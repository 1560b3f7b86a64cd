"""Flat named-array checkpoint container.

Layout (all integers unsigned 32-bit little-endian)::

    magic  b"KGCK"
    format version
    config hash   32 raw bytes (SHA-256 of the canonical config JSON)
    config JSON   length-prefixed UTF-8
    entry count
    per entry: name (length-prefixed UTF-8), rank, dims[rank],
               values (float32 little-endian, row-major)
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

MAGIC = b"KGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).digest()


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def save_arrays(path, arrays: Mapping[str, np.ndarray], config: Mapping) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_u32(VERSION))
        f.write(config_hash(config))
        f.write(_u32(len(cfg)))
        f.write(cfg)
        f.write(_u32(len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4", order="C")
            raw = name.encode("utf-8")
            f.write(_u32(len(raw)))
            f.write(raw)
            f.write(_u32(a.ndim))
            for d in a.shape:
                f.write(_u32(d))
            f.write(a.tobytes())


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = take(32)
    config = json.loads(take(u32()).decode("utf-8"))
    if config_hash(config) != digest:
        raise CheckpointError(f"{path}: config hash mismatch")
    arrays = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays, config


def save_module(path, module: torch.nn.Module, config: Mapping) -> None:
    save_arrays(path, {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()},
                config)


def load_module_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    ref = module.state_dict()
    missing = set(ref) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    module.load_state_dict({k: torch.as_tensor(arrays[k], dtype=ref[k].dtype).reshape(ref[k].shape)
                            for k in ref})
