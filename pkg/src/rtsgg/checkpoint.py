"""Versioned binary checkpoint.

Layout (all integers little-endian uint32):
    b"RXPP" | version | len(config json) | config json (utf-8) | tensor count |
    per tensor: len(name) | name | rank | dims... | float32 data, row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, RelationModel

MAGIC = b"RXPP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: RelationModel, extra_config: dict | None = None) -> bytes:
    config = {"model": model.config.to_dict(), **(extra_config or {})}
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[RelationModel, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    config = json.loads(data[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.copy())
    model = RelationModel(ModelConfig.from_dict(config["model"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    model.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
    return model, config


def save(path: str | Path, model: RelationModel, extra_config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra_config))


def load(path: str | Path) -> tuple[RelationModel, dict]:
    return loads(Path(path).read_bytes())
