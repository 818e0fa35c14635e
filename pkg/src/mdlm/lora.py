"""Low-rank adapters over a frozen :class:`~mdlm.model.ModelParameters`."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch

from .model import ATTN_MATRICES, MLP_MATRICES, ModelParameters, logits_from_ids

DEFAULT_TARGETS = ATTN_MATRICES + MLP_MATRICES


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.1
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ValueError("LoRA needs at least one target pattern")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "LoraConfig":
        return cls(
            rank=int(data["rank"]),
            alpha=float(data["alpha"]),
            dropout=float(data["dropout"]),
            targets=tuple(data["targets"]),
        )


def _matches(name: str, pattern: str) -> bool:
    # a bare pattern like "W_q" matches on the last name segment
    return fnmatch.fnmatchcase(name, pattern) or name.rsplit(".", 1)[-1] == pattern


def resolve_targets(params: ModelParameters, patterns) -> list[str]:
    """Names of the 2-D base tensors hit by ``patterns``, in parameter order."""
    matrices = [n for n, t in params.tensors.items() if t.dim() == 2]
    hit = []
    for pattern in patterns:
        found = [n for n in matrices if _matches(n, pattern)]
        if not found:
            raise ValueError(f"LoRA target pattern {pattern!r} matches no weight matrix")
        hit.extend(found)
    return [n for n in matrices if n in set(hit)]


@dataclass
class LoraAdapter:
    config: LoraConfig
    # target name -> (A [r, in], B [out, r])
    pairs: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, (A, B) in self.pairs.items():
            out[f"lora.A.{name}"] = A
            out[f"lora.B.{name}"] = B
        return out

    @classmethod
    def from_tensors(cls, config: LoraConfig, tensors: Mapping[str, torch.Tensor]) -> "LoraAdapter":
        pairs = {}
        for key, A in tensors.items():
            if key.startswith("lora.A."):
                name = key[len("lora.A."):]
                B = tensors.get(f"lora.B.{name}")
                if B is None:
                    raise ValueError(f"adapter tensor lora.B.{name} is missing")
                pairs[name] = (A, B)
        return cls(config, pairs)

    def numel(self) -> int:
        return sum(A.numel() + B.numel() for A, B in self.pairs.values())


class AdaptedModel:
    """Frozen base parameters plus a trainable :class:`LoraAdapter`.

    ``training`` switches adapter dropout on; eval mode reproduces the base
    forward exactly while ``B`` is zero.
    """

    def __init__(self, base: ModelParameters, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter
        self.training = False

    @property
    def config(self):
        return self.base.config

    @property
    def lora_config(self) -> LoraConfig:
        return self.adapter.config

    @property
    def tensors(self) -> dict[str, torch.Tensor]:
        return {**self.base.tensors, **self.adapter.tensors()}

    def trainable(self) -> dict[str, torch.Tensor]:
        return self.adapter.tensors()

    def numel(self) -> int:
        return self.base.numel() + self.adapter.numel()

    def logits(self, ids, *, training=False, generator=None, overrides=None):
        overrides = overrides or {}
        base = self.base.tensors
        if any(not k.startswith("lora.") for k in overrides):
            base = {**base, **{k: v for k, v in overrides.items() if not k.startswith("lora.")}}
        pairs = {
            name: (overrides.get(f"lora.A.{name}", A), overrides.get(f"lora.B.{name}", B))
            for name, (A, B) in self.adapter.pairs.items()
        }
        cfg = self.adapter.config
        return logits_from_ids(
            self.base.config,
            base,
            ids,
            adapters=pairs,
            scaling=cfg.scaling,
            dropout=cfg.dropout if (training or self.training) else 0.0,
            generator=generator,
        )

    def to(self, dtype: torch.dtype) -> "AdaptedModel":
        pairs = {n: (A.to(dtype), B.to(dtype)) for n, (A, B) in self.adapter.pairs.items()}
        return AdaptedModel(self.base.to(dtype), LoraAdapter(self.adapter.config, pairs))

    def clone(self) -> "AdaptedModel":
        pairs = {n: (A.clone(), B.clone()) for n, (A, B) in self.adapter.pairs.items()}
        return AdaptedModel(self.base.clone(), LoraAdapter(self.adapter.config, pairs))


def attach(params: ModelParameters, cfg: LoraConfig, seed: int = 0) -> AdaptedModel:
    """Wrap ``params`` with fresh adapters: ``A ~ N(0, 1/r)``, ``B = 0``."""
    gen = torch.Generator().manual_seed(seed)
    dtype = params.dtype
    pairs = {}
    for name in resolve_targets(params, cfg.targets):
        fan_in, fan_out = params[name].shape
        A = torch.randn((cfg.rank, fan_in), generator=gen, dtype=torch.float64) / math.sqrt(cfg.rank)
        pairs[name] = (A.to(dtype), torch.zeros((fan_out, cfg.rank), dtype=dtype))
    return AdaptedModel(params, LoraAdapter(cfg, pairs))


def merge(model: AdaptedModel) -> ModelParameters:
    """Fold ``(alpha/r) * B @ A`` into each target and drop the adapter."""
    tensors = dict(model.base.tensors)
    s = model.adapter.config.scaling
    for name, (A, B) in model.adapter.pairs.items():
        # storage is [in, out], the adapter delta is [out, in]
        tensors[name] = tensors[name] + s * (B @ A).T
    return ModelParameters(model.base.config, tensors)


def trainable_fraction(model: AdaptedModel) -> float:
    return model.adapter.numel() / model.numel()
