"""Binary checkpoints: model config, named tensors, memory banks, optimizer moments.

Layout (all integers little-endian)::

    b"HCTX"  u32 version  u32 json_len  json_bytes
    repeated until EOF:
        u32 name_len  name_bytes  u8 dtype (1=f32, 2=f64)  u32 rank
        u64 extent * rank  raw values (row-major, little-endian)

The JSON block is canonical (sorted keys, no whitespace) and holds the
model config, memory occupancies and optimizer step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..memory import MemoryBank
from ..model import HybridLM, ModelConfig, param_shapes
from ..tensor import Tensor
from .optim import TrainState

MAGIC = b"HCTX"
VERSION = 1
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(f: BinaryIO, name: str, values: np.ndarray) -> None:
    raw = name.encode("utf-8")
    tag = _TAGS.get(values.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {values.dtype}")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BI", tag, values.ndim))
    f.write(struct.pack(f"<{values.ndim}Q", *values.shape))
    f.write(np.ascontiguousarray(values, dtype=_DTYPES[tag]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = canonical_json(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for name, values in tensors.items():
            _write_tensor(f, name, np.asarray(values))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not an HCTX checkpoint")
        version, n = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(_read_exact(f, n).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            tag, rank = struct.unpack("<BI", _read_exact(f, 5))
            if tag not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            dt = _DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="))
    return header, tensors


@dataclass
class Checkpoint:
    model: HybridLM
    banks: list[MemoryBank] | None
    state: TrainState | None
    header: dict


def save_checkpoint(path, model: HybridLM, banks: list[MemoryBank] | None = None,
                    state: TrainState | None = None, extra: dict | None = None) -> None:
    header = {"model": model.config.to_dict()}
    tensors = {name: p.values for name, p in model.params.items()}
    if banks is not None:
        header["memory_occupancy"] = [b.occupancy for b in banks]
        for i, b in enumerate(banks):
            tensors[f"layer{i}.memory"] = b.slots.values
    if state is not None:
        header["optimizer"] = {"step": state.step, "seed": state.seed, "names": list(state.m)}
        for n in state.m:
            tensors[f"adam.m.{n}"] = state.m[n]
            tensors[f"adam.v.{n}"] = state.v[n]
    if extra:
        header["extra"] = extra
    write_checkpoint(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    params = {}
    for name in param_shapes(cfg):
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        params[name] = Tensor(tensors[name], dtype=cfg.dtype, requires_grad=True, name=name)
    model = HybridLM(cfg, params)
    banks = None
    if "memory_occupancy" in header:
        banks = [MemoryBank(Tensor(tensors[f"layer{i}.memory"], dtype=cfg.dtype), occ)
                 for i, occ in enumerate(header["memory_occupancy"])]
    state = None
    if "optimizer" in header:
        opt = header["optimizer"]
        state = TrainState({n: tensors[f"adam.m.{n}"] for n in opt["names"]},
                           {n: tensors[f"adam.v.{n}"] for n in opt["names"]},
                           opt["step"], opt["seed"])
    return Checkpoint(model, banks, state, header)
