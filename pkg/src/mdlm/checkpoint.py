"""Binary checkpoint format.

Layout::

    b"MDLM" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | tensor data

The header carries the model/train/LoRA configs, the vocabulary and a tensor
directory (name, section, dtype, shape, byte offset into the data block).
Tensor data is raw little-endian float32 in directory order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .lora import AdaptedModel, LoraAdapter, LoraConfig
from .model import ModelConfig, ModelParameters
from .vocab import Vocabulary

MAGIC = b"MDLM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class Checkpoint:
    header: dict[str, Any]
    model_tensors: dict[str, torch.Tensor]
    lora_tensors: dict[str, torch.Tensor]
    optim_tensors: dict[str, torch.Tensor]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model_config"])

    @property
    def train_config(self) -> dict:
        return self.header.get("train_config") or {}

    @property
    def lora_config(self) -> LoraConfig | None:
        data = self.header.get("lora_config")
        return LoraConfig.from_dict(data) if data else None

    @property
    def vocab(self) -> Vocabulary | None:
        data = self.header.get("vocab")
        return Vocabulary.from_dict(data) if data else None

    @property
    def global_step(self) -> int:
        return int(self.header.get("global_step", 0))

    def base_parameters(self) -> ModelParameters:
        return ModelParameters(self.model_config, dict(self.model_tensors))

    def model(self):
        base = self.base_parameters()
        cfg = self.lora_config
        if cfg is None:
            return base
        return AdaptedModel(base, LoraAdapter.from_tensors(cfg, self.lora_tensors))

    def optimizer_state(self) -> OptimizerState | None:
        meta = self.header.get("optimizer")
        if meta is None:
            return None
        state = OptimizerState(step=int(meta["step"]))
        for key, t in self.optim_tensors.items():
            kind, name = key.split(".", 2)[1:]
            getattr(state, kind)[name] = t
        return state


def _entries(model, state: OptimizerState | None):
    if isinstance(model, AdaptedModel):
        base, adapter = model.base, model.adapter
    else:
        base, adapter = model, None
    for name, t in base.tensors.items():
        yield "model", name, t
    if adapter is not None:
        for name, t in adapter.tensors().items():
            yield "lora", name, t
    if state is not None:
        for name in state.m:
            yield "optimizer", f"optim.m.{name}", state.m[name]
            yield "optimizer", f"optim.v.{name}", state.v[name]


def save_checkpoint(
    path: str | Path,
    model,
    state: OptimizerState | None = None,
    *,
    train_config: Mapping | None = None,
    vocab: Vocabulary | None = None,
    extra: Mapping | None = None,
) -> None:
    directory, blobs, offset = [], [], 0
    for section, name, t in _entries(model, state):
        data = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()
        directory.append({"name": name, "section": section, "dtype": "f32",
                          "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "model_config": model.config.to_dict(),
        "lora_config": model.lora_config.to_dict() if isinstance(model, AdaptedModel) else None,
        "train_config": dict(train_config) if train_config else None,
        "vocab": vocab.to_dict() if vocab is not None else None,
        "optimizer": {"step": state.step} if state is not None else None,
        **(dict(extra) if extra else {}),
        "tensors": directory,
    }
    raw = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def _read_prefix(fh, path) -> dict:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    raw = fh.read(header_len)
    if len(raw) < header_len:
        raise CheckpointError(f"{path}: header truncated ({len(raw)} of {header_len} bytes)")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc


def read_header(path: str | Path) -> dict:
    """Parse only the header; tensor data is not touched."""
    with open(path, "rb") as fh:
        return _read_prefix(fh, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = _read_prefix(fh, path)
        data = fh.read()
    sections: dict[str, dict[str, torch.Tensor]] = {"model": {}, "lora": {}, "optimizer": {}}
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {entry['dtype']}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name} byte count does not match shape {shape}")
        if start + nbytes > len(data):
            raise CheckpointError(
                f"{path}: truncated, tensor {name} needs bytes {start}..{start + nbytes} "
                f"but only {len(data)} data bytes present"
            )
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        sections[entry["section"]][name] = torch.from_numpy(arr.astype(np.float32, copy=True))
    return Checkpoint(header, sections["model"], sections["lora"], sections["optimizer"])
