"""AdamW + cosine schedule training loop with exact gradient accumulation."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import OptimizerState, load_checkpoint, save_checkpoint
from .diffusion import RATE_MAX, RATE_MIN, Mode, make_training_batch, masked_ce_sum
from .lora import AdaptedModel
from .model import ModelParameters, forward_batch
from .vocab import TokenSequence, Vocabulary

log = logging.getLogger(__name__)

_ORDER_KEY = 0x5EED
_MASK_KEY = 0x3A5C
_DROPOUT_KEY = 0xD207


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    CPT = "cpt"
    SFT = "sft"

    @property
    def masking(self) -> Mode:
        return Mode.SFT if self is Phase.SFT else Mode.PRETRAIN


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int | None = None  # None -> 3% of total_steps
    total_steps: int | None = None  # None -> ceil(N / effective_batch) * epochs
    micro_batch: int = 8
    grad_accum: int = 1
    epochs: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    phase: Phase = Phase.PRETRAIN
    checkpoint_every: int = 0
    rate_min: float = RATE_MIN
    rate_max: float = RATE_MAX
    schedule: str = "cosine"  # or "constant" (warmup then flat)

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.micro_batch < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ValueError("micro_batch, grad_accum and epochs must all be >= 1")
        if not 0.0 <= self.rate_min <= self.rate_max <= 1.0:
            raise ValueError("need 0 <= rate_min <= rate_max <= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    def steps_per_epoch(self, dataset_size: int) -> int:
        return math.ceil(dataset_size / self.effective_batch)

    def resolved(self, dataset_size: int) -> "TrainConfig":
        total = self.total_steps
        if total is None:
            total = self.steps_per_epoch(dataset_size) * self.epochs
        warmup = self.warmup_steps
        if warmup is None:
            warmup = int(round(0.03 * total))
        if not 0 <= warmup <= total:
            raise ValueError(f"warmup_steps={warmup} outside [0, total_steps={total}]")
        return replace(self, total_steps=total, warmup_steps=warmup)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase"] = self.phase.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to zero."""
    total, warmup, peak = cfg.total_steps, cfg.warmup_steps, cfg.peak_lr
    if total is None or warmup is None:
        raise ValueError("cosine_lr needs a resolved config (see TrainConfig.resolved)")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup or cfg.schedule == "constant":
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, tensor: torch.Tensor) -> bool:
    # weight matrices only; biases and layernorm vectors are exempt
    return tensor.dim() >= 2


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> bool:
    """Decoupled-weight-decay Adam update, in place on ``params``.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            log.warning("non-finite gradient in %s at optimizer step %d; step skipped", name, state.step + 1)
            return False
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if cfg.weight_decay and decays(name, p):
                p.mul_(1.0 - lr * cfg.weight_decay)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return True


@dataclass
class TrainResult:
    model: object
    state: OptimizerState
    log: list[tuple[int, float, float]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    skipped_examples: int = 0


def _seed_int(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, _ORDER_KEY, epoch])).permutation(n)


def _check_model(model, phase: Phase):
    if phase is Phase.CPT and not isinstance(model, AdaptedModel):
        raise TypeError("CPT trains LoRA adapters; attach an adapter first")
    if phase is not Phase.CPT and not isinstance(model, ModelParameters):
        raise TypeError(f"{phase.value} trains all parameters; merge any adapter first")


def train(
    model,
    dataset: Sequence[TokenSequence],
    cfg: TrainConfig,
    *,
    vocab: Vocabulary,
    state: OptimizerState | None = None,
    start_step: int = 0,
    stop_after: int | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    extra_header: Mapping | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Run the epoch loop and return the trained model with its metrics.

    The loss for one optimizer step is the summed masked cross-entropy over
    every micro-batch divided by the total masked count of the whole step, so
    ``grad_accum`` only changes memory use, not the update.

    ``model`` is updated in place.  ``start_step`` with ``state`` resumes an
    interrupted run; ``stop_after`` halts after that global step.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if len(dataset) < cfg.micro_batch:
        raise ValueError(f"dataset has {len(dataset)} examples, fewer than one micro-batch of {cfg.micro_batch}")
    cfg = cfg.resolved(len(dataset))
    _check_model(model, cfg.phase)
    state = state if state is not None else OptimizerState()
    mask_id, pad_id = vocab.mask_id, vocab.pad_id
    if model.config.pad_id != pad_id:
        raise ValueError(f"model pad_id={model.config.pad_id} disagrees with vocabulary PAD={pad_id}")

    trainable = model.trainable()
    names = list(trainable)
    per_epoch = cfg.steps_per_epoch(len(dataset))
    total = cfg.total_steps
    last = total if stop_after is None else min(total, stop_after)

    metrics_fh = None
    writer = None
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "a" if start_step else "w", newline="")
        writer = csv.writer(metrics_fh)
        if not start_step:
            writer.writerow(["step", "lr", "loss"])
            metrics_fh.flush()

    result = TrainResult(model, state)
    epoch_ce, epoch_n, current_epoch = 0.0, 0, None
    order = None
    try:
        for step in range(start_step, last):
            epoch, pos = divmod(step, per_epoch)
            if epoch != current_epoch:
                if current_epoch is not None and epoch_n:
                    result.epoch_losses.append(epoch_ce / epoch_n)
                epoch_ce, epoch_n, current_epoch = 0.0, 0, epoch
                order = epoch_order(cfg.seed, epoch, len(dataset))
            idx = order[pos * cfg.effective_batch:(pos + 1) * cfg.effective_batch]
            examples = [dataset[i] for i in idx]

            # corrupt the whole effective batch first so the normaliser is known
            micro = []
            n_masked = 0
            for k in range(cfg.grad_accum):
                chunk = examples[k * cfg.micro_batch:(k + 1) * cfg.micro_batch]
                if not chunk:
                    break
                batch = make_training_batch(
                    chunk, cfg.phase.masking, cfg.seed, mask_id=mask_id, pad_id=pad_id,
                    rate_min=cfg.rate_min, rate_max=cfg.rate_max,
                    key=(_MASK_KEY, step), index_offset=k * cfg.micro_batch,
                )
                result.skipped_examples += batch.skipped
                if batch.n_masked:
                    micro.append(batch)
                    n_masked += batch.n_masked
            if n_masked == 0:
                log.warning("step %d: no maskable positions in batch; skipped", step + 1)
                continue

            grads = {n: torch.zeros_like(trainable[n]) for n in names}
            step_ce = 0.0
            for k, batch in enumerate(micro):
                leaves = {n: trainable[n].detach().requires_grad_(True) for n in names}
                gen = torch.Generator().manual_seed(_seed_int(cfg.seed, _DROPOUT_KEY, step, k))
                logits = forward_batch(model, batch.inputs, training=True, generator=gen, overrides=leaves)
                ce = masked_ce_sum(logits, batch.targets, batch.mask)
                loss = ce / n_masked
                g = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
                for n, gi in zip(names, g):
                    if gi is not None:
                        grads[n] += gi
                step_ce += float(ce.detach())

            lr = cosine_lr(step, cfg)
            # adapter and base tensors are updated in place
            adamw_step(model.trainable(), grads, state, lr, cfg)

            loss_value = step_ce / n_masked
            epoch_ce += step_ce
            epoch_n += n_masked
            result.log.append((step + 1, lr, loss_value))
            if writer is not None:
                writer.writerow([step + 1, repr(lr), repr(loss_value)])
                metrics_fh.flush()
            if on_step is not None:
                on_step(step + 1, lr, loss_value)
            if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                    and step + 1 < last:
                p = Path(checkpoint_path)
                save_checkpoint(p.with_name(f"{p.stem}-step{step + 1}{p.suffix}"), model, state,
                                train_config=cfg.to_dict(), vocab=vocab,
                                extra={"global_step": step + 1, **(extra_header or {})})
        if epoch_n:
            result.epoch_losses.append(epoch_ce / epoch_n)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, state, train_config=cfg.to_dict(), vocab=vocab,
                        extra={"global_step": last, **(extra_header or {})})
    return result


def resume(checkpoint_path: str | Path, dataset: Sequence[TokenSequence], **kwargs) -> TrainResult:
    """Continue a run from a checkpoint written by :func:`train`."""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_dict(ckpt.train_config)
    vocab = kwargs.pop("vocab", None) or ckpt.vocab
    return train(ckpt.model(), dataset, cfg, vocab=vocab, state=ckpt.optimizer_state(),
                 start_step=ckpt.global_step, **kwargs)
