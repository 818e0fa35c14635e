"""A small bidirectional transformer encoder over a flat named-tensor store.

Parameters live in an ordered ``dict[str, Tensor]`` rather than ``nn.Module``
attributes so LoRA targeting, checkpointing and optimizer state can all key on
the same flat names.  Weight matrices are stored ``[in, out]`` and applied as
``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .vocab import TokenSequence

ATTN_MATRICES = ("W_q", "W_k", "W_v", "W_o")
MLP_MATRICES = ("W_up", "W_down")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 64
    max_positions: int = 256
    seed: int = 0
    pad_id: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.pad_id is not None and not 0 <= self.pad_id < self.vocab_size:
            raise ValueError(f"pad_id {self.pad_id} outside vocabulary of {self.vocab_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, V = self.d_model, self.d_ffn, self.vocab_size
        shapes: dict[str, tuple[int, ...]] = {
            "tok_emb": (V, d),
            "pos_emb": (self.max_positions, d),
        }
        for i in range(self.n_layers):
            p = f"layers.{i}"
            shapes[f"{p}.ln1.scale"] = (d,)
            shapes[f"{p}.ln1.shift"] = (d,)
            for m in ATTN_MATRICES:
                shapes[f"{p}.attn.{m}"] = (d, d)
                shapes[f"{p}.attn.b_{m[2:]}"] = (d,)
            shapes[f"{p}.ln2.scale"] = (d,)
            shapes[f"{p}.ln2.shift"] = (d,)
            shapes[f"{p}.mlp.W_up"] = (d, f)
            shapes[f"{p}.mlp.b_up"] = (f,)
            shapes[f"{p}.mlp.W_down"] = (f, d)
            shapes[f"{p}.mlp.b_down"] = (d,)
        shapes["ln_f.scale"] = (d,)
        shapes["ln_f.shift"] = (d,)
        shapes["head.W"] = (d, V)
        shapes["head.b"] = (V,)
        return shapes


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def to(self, dtype: torch.dtype) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.to(dtype) for k, v in self.tensors.items()})

    def clone(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def trainable(self) -> dict[str, torch.Tensor]:
        return self.tensors

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise FloatingPointError(f"tensor {name} has non-finite entries")


def init_parameters(config: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelParameters:
    gen = torch.Generator().manual_seed(config.seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "scale":
            t = torch.ones(shape, dtype=dtype)
        elif leaf == "shift" or leaf.startswith("b"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float64).mul_(INIT_STD).to(dtype)
        tensors[name] = t
    return ModelParameters(config, tensors)


class _Projector:
    """Computes ``x @ W + b`` with an optional low-rank adapter on ``W``."""

    def __init__(self, tensors, adapters=None, scaling=0.0, dropout=0.0, generator=None):
        self.tensors = tensors
        self.adapters = adapters or {}
        self.scaling = scaling
        self.dropout = dropout
        self.generator = generator

    def __call__(self, x, weight, bias):
        y = x @ self.tensors[weight] + self.tensors[bias]
        pair = self.adapters.get(weight)
        if pair is not None:
            A, B = pair
            if self.dropout > 0.0:
                keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.dropout
                x = x * keep / (1.0 - self.dropout)
            y = y + self.scaling * ((x @ A.T) @ B.T)
        return y


def logits_from_ids(
    config: ModelConfig,
    tensors: Mapping[str, torch.Tensor],
    ids: torch.Tensor,
    *,
    adapters: Mapping[str, tuple[torch.Tensor, torch.Tensor]] | None = None,
    scaling: float = 0.0,
    dropout: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Batched forward pass: ``ids`` [B, L] -> logits [B, L, V]."""
    B, L = ids.shape
    proj = _Projector(tensors, adapters, scaling, dropout, generator)
    d, H = config.d_model, config.n_heads
    dh = d // H
    # F.embedding has a deterministic CPU backward; fancy indexing does not
    h = F.embedding(ids, tensors["tok_emb"]) + tensors["pos_emb"][:L]

    # additive key mask; only PAD is hidden, MASK attends normally
    attn_bias = torch.zeros((B, 1, 1, L), dtype=h.dtype)
    if config.pad_id is not None:
        attn_bias = attn_bias.masked_fill((ids == config.pad_id)[:, None, None, :], float("-inf"))

    for i in range(config.n_layers):
        p = f"layers.{i}"
        x = F.layer_norm(h, (d,), tensors[f"{p}.ln1.scale"], tensors[f"{p}.ln1.shift"], config.ln_eps)
        q = proj(x, f"{p}.attn.W_q", f"{p}.attn.b_q").view(B, L, H, dh).transpose(1, 2)
        k = proj(x, f"{p}.attn.W_k", f"{p}.attn.b_k").view(B, L, H, dh).transpose(1, 2)
        v = proj(x, f"{p}.attn.W_v", f"{p}.attn.b_v").view(B, L, H, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh) + attn_bias
        ctx = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(B, L, d)
        h = h + proj(ctx, f"{p}.attn.W_o", f"{p}.attn.b_o")
        x = F.layer_norm(h, (d,), tensors[f"{p}.ln2.scale"], tensors[f"{p}.ln2.shift"], config.ln_eps)
        x = F.gelu(proj(x, f"{p}.mlp.W_up", f"{p}.mlp.b_up"))
        h = h + proj(x, f"{p}.mlp.W_down", f"{p}.mlp.b_down")

    h = F.layer_norm(h, (d,), tensors["ln_f.scale"], tensors["ln_f.shift"], config.ln_eps)
    return h @ tensors["head.W"] + tensors["head.b"]


def _ids_tensor(config: ModelConfig, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids[None]
    if ids.shape[1] > config.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions={config.max_positions}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range for vocabulary of {config.vocab_size}")
    return ids


def forward_batch(model, ids, *, training: bool = False, generator: torch.Generator | None = None,
                  overrides: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Logits [B, L, V] for a padded id batch.

    ``model`` is :class:`ModelParameters` or a LoRA-adapted model.
    ``overrides`` replaces named tensors (used to thread autograd leaves).
    """
    ids = _ids_tensor(model.config, ids)
    if hasattr(model, "adapter"):
        return model.logits(ids, training=training, generator=generator, overrides=overrides)
    tensors = model.tensors if not overrides else {**model.tensors, **overrides}
    return logits_from_ids(model.config, tensors, ids)


def forward(model, tokens: TokenSequence | list[int]) -> torch.Tensor:
    """Pre-softmax logits [L, V] for one sequence, in eval mode."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    with torch.no_grad():
        return forward_batch(model, [list(ids)])[0]


def backward(model, tokens: TokenSequence | list[int], loss_grad: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(loss_grad * logits)`` for every trainable tensor.

    ``loss_grad`` is dL/dlogits for the forward pass on ``tokens``; frozen
    tensors get no entry.
    """
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    V = model.config.vocab_size
    loss_grad = torch.as_tensor(loss_grad)
    if tuple(loss_grad.shape) != (len(ids), V):
        raise ValueError(
            f"loss_grad has shape {tuple(loss_grad.shape)} but forward on these tokens gives ({len(ids)}, {V})"
        )
    trainable = model.trainable()
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in trainable.items()}
    logits = forward_batch(model, [ids], overrides=leaves)[0]
    names = list(leaves)
    grads = torch.autograd.grad(
        logits, [leaves[n] for n in names], grad_outputs=loss_grad.to(logits.dtype), allow_unused=True
    )
    return {n: (g if g is not None else torch.zeros_like(leaves[n])) for n, g in zip(names, grads)}
