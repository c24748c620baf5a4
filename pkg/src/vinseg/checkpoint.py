"""Binary checkpoint container.

Layout::

    b"VSEGCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: config, tensor index, training metadata
    payload                little-endian float32 tensors in index order

The tensor index maps each name to ``{"shape", "offset", "length"}`` with the
offset relative to the start of the payload and the length in bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, build_model
from .optim import Optimizer

MAGIC = b"VSEGCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    model: Model
    optimizer_meta: Optional[dict] = None
    optimizer_arrays: dict = field(default_factory=dict)
    epoch: int = 0
    val_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def optimizer(self) -> Optional[Optimizer]:
        if self.optimizer_meta is None:
            return None
        return Optimizer.from_meta(self.model.params, self.optimizer_meta, self.optimizer_arrays)


def encode(arrays: dict, header: dict) -> bytes:
    index, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"shape": list(np.shape(arr)), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, tensors=index)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(chunks)


def decode(buf: bytes) -> tuple[dict, dict]:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(buf)[20 + hlen:]
    arrays = {}
    for name, ent in header.pop("tensors").items():
        start, length = ent["offset"], ent["length"]
        if start + length > len(payload):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        arr = np.frombuffer(payload[start:start + length], dtype="<f4")
        arrays[name] = arr.reshape(ent["shape"]).astype(np.float32)
    return header, arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = dict(ckpt.model.state_arrays())
    arrays.update(ckpt.optimizer_arrays)
    header = {
        "config": ckpt.model.config.to_dict(),
        "epoch": ckpt.epoch,
        "val_history": ckpt.val_history,
        "optimizer": ckpt.optimizer_meta,
        "extra": ckpt.extra,
    }
    Path(path).write_bytes(encode(arrays, header))


def load_checkpoint(path) -> Checkpoint:
    header, arrays = decode(Path(path).read_bytes())
    model = build_model(ModelConfig.from_dict(header["config"]))
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return Checkpoint(
        model=model,
        optimizer_meta=header.get("optimizer"),
        optimizer_arrays=opt_arrays,
        epoch=int(header.get("epoch", 0)),
        val_history=list(header.get("val_history", [])),
        extra=header.get("extra", {}) or {},
    )
