"""Blockwise low-confidence remasking sampler (the learned reverse process).

Each step runs the encoder over the whole sequence, proposes a token for every
still-masked position of the current block, and commits only the most
confident ones.  Committing a position is the ``q(x_{t-1} | x_t, x0)`` half of
the reverse kernel: a revealed token is copied from the model's ``x0`` guess
and never changes again.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import forward_batch
from .vocab import Region, TokenSequence


@dataclass(frozen=True)
class GeneratorConfig:
    steps: int = 128
    max_new_tokens: int = 128
    temperature: float = 0.1
    block_len: int = 32
    rep_penalty: float = 1.2
    remask: str = "low_conf"
    stochastic: bool = False
    cfg_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.rep_penalty < 1:
            raise ValueError(f"rep_penalty must be >= 1, got {self.rep_penalty}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.remask not in ("low_conf", "random"):
            raise ValueError(f"remask must be 'low_conf' or 'random', got {self.remask!r}")
        if min(self.steps, self.max_new_tokens, self.block_len) < 1:
            raise ValueError("steps, max_new_tokens and block_len must be >= 1")
        if self.steps % self.num_blocks:
            raise ValueError(f"steps={self.steps} is not divisible by the {self.num_blocks} blocks")
        if self.steps_per_block > self.block_len:
            raise ValueError(
                f"{self.steps_per_block} steps per block exceeds block_len={self.block_len}"
            )

    @property
    def padded_tokens(self) -> int:
        """``max_new_tokens`` rounded up to a whole number of blocks."""
        return self.num_blocks * self.block_len

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.max_new_tokens / self.block_len)

    @property
    def steps_per_block(self) -> int:
        return self.steps // self.num_blocks

    def to_dict(self) -> dict:
        return asdict(self)


# Generation presets; steps equal tokens, so one reveal per step.
LONG = GeneratorConfig(steps=128, max_new_tokens=128)
SHORT = GeneratorConfig(steps=64, max_new_tokens=64)
PRESETS = {"long": LONG, "short": SHORT}


def step_quotas(block_len: int, steps: int) -> list[int]:
    """Finalizations per step inside one block; sums to ``block_len``."""
    base, rem = divmod(block_len, steps)
    return [base + (1 if i < rem else 0) for i in range(steps)]


def apply_repetition_penalty(logits: torch.Tensor, context_ids, penalty: float) -> torch.Tensor:
    """Divide positive / multiply non-positive logits of tokens seen in context."""
    if penalty < 1:
        raise ValueError(f"penalty must be >= 1, got {penalty}")
    out = logits.clone()
    if penalty == 1.0:
        return out
    seen = torch.as_tensor(sorted({int(i) for i in context_ids}), dtype=torch.long)
    if seen.numel() == 0:
        return out
    vals = out[..., seen]
    out[..., seen] = torch.where(vals > 0, vals / penalty, vals * penalty)
    return out


def apply_cfg(cond_logits: torch.Tensor, uncond_logits: torch.Tensor | None, scale: float) -> torch.Tensor:
    """Classifier-free guidance: ``(1 + w) * cond - w * uncond``."""
    if scale == 0:
        return cond_logits
    if uncond_logits is None or uncond_logits.shape != cond_logits.shape:
        raise ValueError("unconditional logits must match the conditional ones in shape")
    return (1 + scale) * cond_logits - scale * uncond_logits


def confidence_select(confidences, k: int, *, remask: str = "low_conf",
                      rng: np.random.Generator | None = None) -> list[int]:
    """Indices (into ``confidences``) to finalize this step.

    ``low_conf`` keeps the ``k`` most confident, ties to the lower index;
    ``random`` picks ``k`` uniformly.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if not 1 <= k <= conf.size:
        raise ValueError(f"quota k={k} must lie in [1, {conf.size}]")
    if remask == "random":
        if rng is None:
            raise ValueError("random remasking needs an rng")
        return sorted(int(i) for i in rng.choice(conf.size, size=k, replace=False))
    if remask != "low_conf":
        raise ValueError(f"unknown remask strategy {remask!r}")
    # stable sort on -conf keeps lower indices first among ties
    order = np.argsort(-conf, kind="stable")
    return sorted(int(i) for i in order[:k])


@dataclass
class StepRecord:
    block: int
    step: int
    finalized: list[int]
    ids: list[int]


@dataclass
class Generation:
    sequence: TokenSequence
    prompt_len: int
    trace: list[StepRecord] = field(default_factory=list)
    forward_passes: int = 0

    @property
    def new_ids(self) -> list[int]:
        return self.sequence.ids[self.prompt_len:]


def _prepare_logits(logits, context, cfg: GeneratorConfig) -> torch.Tensor:
    logits = apply_repetition_penalty(logits.to(torch.float64), context, cfg.rep_penalty)
    return logits / cfg.temperature


def generate_with_trace(model, prompt: TokenSequence, cfg: GeneratorConfig, *, mask_id: int,
                        record_states: bool = True) -> Generation:
    """Run the sampler and keep a per-step record of what was finalized."""
    if mask_id in prompt.ids:
        raise ValueError("prompt must not contain MASK")
    P = len(prompt)
    total = P + cfg.padded_tokens
    if total > model.config.max_positions:
        raise ValueError(
            f"prompt of {P} tokens + {cfg.padded_tokens} new tokens exceeds max_positions="
            f"{model.config.max_positions}"
        )
    x = torch.tensor(list(prompt.ids) + [mask_id] * cfg.padded_tokens, dtype=torch.long)
    prompt_region = torch.tensor([r == Region.PROMPT for r in prompt.region] + [False] * cfg.padded_tokens)
    # an all-PLAIN prompt is still conditioning; hide all of it for CFG
    if not prompt_region.any():
        prompt_region[:P] = True
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out = Generation(TokenSequence([]), P)
    quotas = step_quotas(cfg.block_len, cfg.steps_per_block)

    with torch.no_grad():
        for b in range(cfg.num_blocks):
            lo, hi = P + b * cfg.block_len, P + (b + 1) * cfg.block_len
            for s, k in enumerate(quotas):
                masked = (x[lo:hi] == mask_id).nonzero().flatten() + lo
                if k == 0 or masked.numel() == 0:
                    continue
                k = min(k, masked.numel())
                context = x[x != mask_id].tolist()
                cond = forward_batch(model, x[None])[0, masked]
                out.forward_passes += 1
                logits = _prepare_logits(cond, context, cfg)
                if cfg.cfg_scale != 0:
                    x_u = x.clone()
                    x_u[prompt_region] = mask_id
                    uncond = forward_batch(model, x_u[None])[0, masked]
                    out.forward_passes += 1
                    logits = apply_cfg(logits, _prepare_logits(uncond, context, cfg), cfg.cfg_scale)
                # the absorbing state is never a valid reveal; done after guidance so -inf never meets -inf
                logits[..., mask_id] = float("-inf")
                probs = torch.softmax(logits, dim=-1)
                if cfg.stochastic:
                    cand = torch.multinomial(probs, 1, generator=gen).flatten()
                else:
                    cand = probs.argmax(dim=-1)
                conf = probs.gather(1, cand[:, None]).flatten()
                chosen = confidence_select(conf.numpy(), k, remask=cfg.remask, rng=rng)
                pos = masked[chosen]
                x[pos] = cand[chosen]
                out.trace.append(StepRecord(b, len(out.trace), pos.tolist(), x.tolist() if record_states else []))
    ids = x.tolist()[: P + cfg.max_new_tokens]
    region = list(prompt.region) + [Region.RESPONSE] * cfg.max_new_tokens
    out.sequence = TokenSequence(ids, region=region)
    return out


def generate(model, prompt: TokenSequence, cfg: GeneratorConfig, *, mask_id: int) -> TokenSequence:
    return generate_with_trace(model, prompt, cfg, mask_id=mask_id, record_states=False).sequence


def truncate_at_eos(ids: Sequence[int], eos_id: int) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(eos_id)] if eos_id in ids else ids


def trace_lines(trace: Sequence[StepRecord], render) -> list[str]:
    """One text row per step; ``render`` maps an id list to a string."""
    return [render(rec.ids) for rec in trace]
