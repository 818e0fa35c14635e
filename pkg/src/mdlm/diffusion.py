"""Absorbing-state forward corruption and the masked cross-entropy objective."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .vocab import Region, TokenSequence

log = logging.getLogger(__name__)

RATE_MIN = 0.05
RATE_MAX = 0.95


class Mode(str, enum.Enum):
    PRETRAIN = "pretrain"
    SFT = "sft"


@dataclass(frozen=True)
class NoiseSchedule:
    beta: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if ((b < 0) | (b > 1)).any():
            raise ValueError("every beta_t must lie in [0, 1]")
        object.__setattr__(self, "beta", tuple(float(x) for x in b))

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def survival(self) -> np.ndarray:
        """``s_t = prod_{u<=t} (1 - beta_u)`` for t = 1..T."""
        return np.cumprod(1.0 - np.asarray(self.beta))

    def mask_prob(self, t: int) -> float:
        """Marginal probability that a clean token is MASK after ``t`` steps."""
        return 0.0 if t == 0 else float(1.0 - self.survival[t - 1])

    @classmethod
    def linear(cls, T: int) -> "NoiseSchedule":
        """Schedule whose marginal mask probability rises linearly to 1 at ``T``."""
        s = 1.0 - np.arange(T + 1) / T
        beta = 1.0 - s[1:] / s[:-1]
        return cls(tuple(beta))


def transition_prob(x_prev: int, x_next: int, beta_t: float, mask_id: int) -> float:
    """Single-token kernel ``q(x_t = x_next | x_{t-1} = x_prev)``."""
    if not 0.0 <= beta_t <= 1.0:
        raise ValueError(f"beta_t must lie in [0, 1], got {beta_t}")
    if x_prev == mask_id:
        return 1.0 if x_next == mask_id else 0.0
    if x_next == x_prev:
        return 1.0 - beta_t
    if x_next == mask_id:
        return beta_t
    return 0.0


def eligible_positions(seq: TokenSequence, mode: Mode | str, pad_id: int | None) -> np.ndarray:
    """Boolean array of positions that may be masked under ``mode``."""
    region = np.asarray([int(r) for r in seq.region], dtype=np.int64)
    ids = np.asarray(seq.ids, dtype=np.int64)
    ok = np.ones(len(seq), dtype=bool) if pad_id is None else ids != pad_id
    if Mode(mode) is Mode.SFT:
        return ok & (region == Region.RESPONSE)
    return ok & (region != Region.PROMPT)


def corrupt(
    x0: TokenSequence,
    mask_rate: float,
    rng: np.random.Generator,
    mask_id: int,
    pad_id: int | None = None,
    *,
    eligible: np.ndarray | None = None,
) -> TokenSequence:
    """Independently replace each eligible token by MASK with ``mask_rate``.

    PAD and PROMPT positions are never touched unless ``eligible`` overrides.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError(f"mask_rate must lie in [0, 1], got {mask_rate}")
    if mask_id in x0.ids:
        raise ValueError("input already contains MASK; corrupt expects a clean x0")
    if eligible is None:
        eligible = eligible_positions(x0, Mode.PRETRAIN, pad_id)
    hit = (rng.random(len(x0)) < mask_rate) & eligible
    return _apply_mask(x0, hit, mask_id)


def corrupt_step(xt: TokenSequence, beta_t: float, rng: np.random.Generator, mask_id: int,
                 pad_id: int | None = None) -> TokenSequence:
    """One Markov step of the forward chain; MASK is absorbing."""
    eligible = eligible_positions(xt, Mode.PRETRAIN, pad_id)
    ids = np.asarray(xt.ids)
    eligible &= ids != mask_id
    hit = (rng.random(len(xt)) < beta_t) & eligible
    out = _apply_mask(xt, hit, mask_id)
    out.masked = [m or (i == mask_id) for m, i in zip(out.masked, out.ids)]
    return out


def _apply_mask(x: TokenSequence, hit: np.ndarray, mask_id: int) -> TokenSequence:
    ids = [mask_id if h else t for t, h in zip(x.ids, hit)]
    masked = [bool(h) or m for h, m in zip(hit, x.masked)]
    return TokenSequence(ids, masked, list(x.region))


def example_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream per (seed, key...) so batches don't depend on threading."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass
class TrainingBatch:
    inputs: torch.Tensor  # [B, L] corrupted ids, PAD-filled
    targets: torch.Tensor  # [B, L] original ids
    mask: torch.Tensor  # [B, L] bool, positions that contribute loss
    rates: list[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def make_training_batch(
    examples: Sequence[TokenSequence],
    mode: Mode | str,
    rng_or_seed,
    *,
    mask_id: int,
    pad_id: int,
    rate_min: float = RATE_MIN,
    rate_max: float = RATE_MAX,
    fixed_rate: float | None = None,
    key: Sequence[int] = (),
    index_offset: int = 0,
    max_redraws: int = 1000,
) -> TrainingBatch:
    """Corrupt ``examples`` into a padded training batch.

    ``rng_or_seed`` is either a shared ``np.random.Generator`` or an integer
    seed; with a seed each example ``j`` draws from its own stream
    ``(seed, *key, index_offset + j)``.  A draw that masks nothing is redrawn;
    SFT examples with no RESPONSE positions are skipped and counted.
    """
    mode = Mode(mode)
    rows, rates, skipped = [], [], 0
    for j, ex in enumerate(examples):
        if isinstance(rng_or_seed, np.random.Generator):
            rng = rng_or_seed
        else:
            rng = example_rng(int(rng_or_seed), *key, index_offset + j)
        if mode is Mode.PRETRAIN and any(r != Region.PLAIN for r in ex.region):
            raise ValueError("PRETRAIN examples must be region=PLAIN")
        eligible = eligible_positions(ex, mode, pad_id)
        if not eligible.any():
            skipped += 1
            continue
        for _ in range(max_redraws):
            rate = fixed_rate if fixed_rate is not None else float(rng.uniform(rate_min, rate_max))
            xt = corrupt(ex, rate, rng, mask_id, pad_id, eligible=eligible)
            if any(xt.masked):
                break
        else:
            raise RuntimeError(f"example {index_offset + j}: no position masked after {max_redraws} draws")
        rows.append((ex, xt))
        rates.append(rate)
    if skipped:
        log.info("skipped %d example(s) with nothing to mask", skipped)
    if not rows:
        return TrainingBatch(torch.zeros((0, 0), dtype=torch.long), torch.zeros((0, 0), dtype=torch.long),
                             torch.zeros((0, 0), dtype=torch.bool), [], skipped)
    width = max(len(ex) for ex, _ in rows)
    inputs = torch.full((len(rows), width), pad_id, dtype=torch.long)
    targets = torch.full((len(rows), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for r, (ex, xt) in enumerate(rows):
        n = len(ex)
        inputs[r, :n] = torch.tensor(xt.ids)
        targets[r, :n] = torch.tensor(ex.ids)
        mask[r, :n] = torch.tensor(xt.masked)
    return TrainingBatch(inputs, targets, mask, rates, skipped)


def masked_ce_sum(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Summed cross-entropy over positions where ``mask`` is true."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    V = logits.shape[-1]
    sel = logits.reshape(-1, V)[mask.reshape(-1)]
    return F.cross_entropy(sel, torch.as_tensor(targets).reshape(-1)[mask.reshape(-1)], reduction="sum")


def masked_ce_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; unmasked ones are ignored."""
    n = int(torch.as_tensor(mask, dtype=torch.bool).sum())
    if n == 0:
        raise ValueError("masked_ce_loss needs at least one masked position")
    return masked_ce_sum(logits, targets, mask) / n
