"""Masked-LM pseudo-perplexity."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .diffusion import Mode, corrupt, eligible_positions, example_rng, masked_ce_sum
from .model import forward_batch
from .vocab import TokenSequence

log = logging.getLogger(__name__)

_EVAL_KEY = 0xE7A1


@dataclass(frozen=True)
class EvalConfig:
    mask_prob: float = 0.15
    max_len: int = 512
    seed: int = 0
    num_rounds: int = 4

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie in (0, 1), got {self.mask_prob}")
        if self.max_len < 1 or self.num_rounds < 1:
            raise ValueError("max_len and num_rounds must be >= 1")


@dataclass
class EvalResult:
    ppl: float
    total_ce: float
    masked_tokens: int
    documents: int

    def summary(self) -> dict:
        return {"docs": self.documents, "masked_tokens": self.masked_tokens, "ppl": self.ppl}


def evaluate(model, documents: Sequence[TokenSequence], cfg: EvalConfig, *, mask_id: int,
             pad_id: int | None = None) -> EvalResult:
    """Corrupt every document ``num_rounds`` times at ``mask_prob`` and score the masks.

    Document ``d`` round ``r`` draws from its own seeded stream, and totals are
    reduced in (document, round) order, so the result is reproducible bit for bit.
    """
    if not documents:
        raise ValueError("pseudo_perplexity needs at least one document")
    max_len = cfg.max_len
    if max_len > model.config.max_positions:
        log.warning("max_len %d exceeds model max_positions %d; truncating to the latter",
                    max_len, model.config.max_positions)
        max_len = model.config.max_positions
    total_ce = 0.0
    total_n = 0
    with torch.no_grad():
        for d, doc in enumerate(documents):
            doc = TokenSequence(doc.ids[:max_len], region=doc.region[:max_len])
            if not len(doc):
                continue
            eligible = eligible_positions(doc, Mode.PRETRAIN, pad_id)
            for r in range(cfg.num_rounds):
                rng = example_rng(cfg.seed, _EVAL_KEY, d, r)
                xt = corrupt(doc, cfg.mask_prob, rng, mask_id, pad_id, eligible=eligible)
                mask = torch.tensor(xt.masked)
                n = int(mask.sum())
                if n == 0:
                    continue
                logits = forward_batch(model, [xt.ids])[0].to(torch.float64)
                total_ce += float(masked_ce_sum(logits, torch.tensor(doc.ids), mask))
                total_n += n
    if total_n == 0:
        raise ValueError("no position was masked across the corpus; cannot compute perplexity")
    return EvalResult(math.exp(total_ce / total_n), total_ce, total_n, len(documents))


def pseudo_perplexity(model, documents: Sequence[TokenSequence], cfg: EvalConfig | None = None, *,
                      mask_id: int, pad_id: int | None = None) -> float:
    return evaluate(model, documents, cfg or EvalConfig(), mask_id=mask_id, pad_id=pad_id).ppl
