"""scikit-learn style front end over the training, sampling and scoring modules.

>>> lm = MaskedDiffusionLM(epochs=2).fit(texts)            # doctest: +SKIP
>>> lm.set_params(lora_rank=4).partial_fit(new_domain)      # doctest: +SKIP
>>> lm.partial_fit(instructions, responses)                 # doctest: +SKIP
>>> lm.predict(["Türkiye'nin başkenti neresidir?"])         # doctest: +SKIP
"""

from __future__ import annotations

import math

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffusion import RATE_MAX, RATE_MIN
from .evaluation import EvalConfig, evaluate
from .generator import GeneratorConfig, generate, truncate_at_eos
from .lora import AdaptedModel, LoraConfig, attach, merge
from .model import ModelConfig, init_parameters
from .trainer import Phase, TrainConfig, train
from .validation import check_pairs, check_positive_int, check_texts
from .vocab import TokenSequence, build_vocab, encode, format_prompt, format_sft_pair


class MaskedDiffusionLM(BaseEstimator):
    """Masked diffusion language model with the fit/partial_fit/predict/score protocol.

    ``fit(X)`` builds a vocabulary and trains a fresh encoder on plain texts.
    ``partial_fit(X)`` continues pre-training; with ``lora_rank`` set it does
    so through a LoRA adapter over the frozen model.  ``partial_fit(X, y)`` is
    full-parameter instruction tuning on (instruction, response) pairs, merging
    any adapter first.  ``predict`` samples completions and ``score`` returns
    minus the log pseudo-perplexity (higher is better).
    """

    def __init__(
        self,
        tokenizer="char",
        max_vocab=512,
        n_layers=2,
        d_model=64,
        n_heads=4,
        d_ffn=128,
        max_positions=256,
        lr=1e-3,
        epochs=10,
        micro_batch=8,
        grad_accum=1,
        warmup_steps=None,
        weight_decay=0.01,
        schedule="cosine",
        mask_rate_range=(RATE_MIN, RATE_MAX),
        lora_rank=None,
        lora_alpha=None,
        lora_dropout=0.1,
        response_len=None,
        steps=64,
        max_new_tokens=64,
        block_len=32,
        temperature=0.1,
        rep_penalty=1.2,
        remask="low_conf",
        stochastic=False,
        cfg_scale=0.0,
        mask_prob=0.15,
        eval_rounds=4,
        random_state=0,
    ):
        self.tokenizer = tokenizer
        self.max_vocab = max_vocab
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.max_positions = max_positions
        self.lr = lr
        self.epochs = epochs
        self.micro_batch = micro_batch
        self.grad_accum = grad_accum
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.mask_rate_range = mask_rate_range
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lora_dropout = lora_dropout
        self.response_len = response_len
        self.steps = steps
        self.max_new_tokens = max_new_tokens
        self.block_len = block_len
        self.temperature = temperature
        self.rep_penalty = rep_penalty
        self.remask = remask
        self.stochastic = stochastic
        self.cfg_scale = cfg_scale
        self.mask_prob = mask_prob
        self.eval_rounds = eval_rounds
        self.random_state = random_state

    # -- helpers

    def _train_config(self, phase: Phase, stage: int) -> TrainConfig:
        lo, hi = self.mask_rate_range
        return TrainConfig(
            peak_lr=self.lr,
            warmup_steps=self.warmup_steps,
            micro_batch=check_positive_int(self.micro_batch, "micro_batch"),
            grad_accum=check_positive_int(self.grad_accum, "grad_accum"),
            epochs=check_positive_int(self.epochs, "epochs"),
            weight_decay=self.weight_decay,
            seed=self.random_state + 1000 * stage,
            phase=phase,
            rate_min=lo,
            rate_max=hi,
            schedule=self.schedule,
        )

    def _generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            steps=self.steps,
            max_new_tokens=self.max_new_tokens,
            temperature=self.temperature,
            block_len=self.block_len,
            rep_penalty=self.rep_penalty,
            remask=self.remask,
            stochastic=self.stochastic,
            cfg_scale=self.cfg_scale,
            seed=self.random_state,
        )

    def _plain(self, X):
        cap = self.model_.config.max_positions
        seqs = [encode(self.vocab_, x) for x in X]
        return [s if len(s) <= cap else TokenSequence(s.ids[:cap]) for s in seqs]

    def _run(self, model, dataset, phase):
        cfg = self._train_config(phase, len(self.history_))
        result = train(model, dataset, cfg, vocab=self.vocab_)
        self.history_.append({"phase": phase.value, "log": result.log, "epoch_losses": result.epoch_losses})
        self.model_ = result.model
        return self

    # -- estimator protocol

    def fit(self, X, y=None):
        """Build the vocabulary from ``X`` (and ``y``) and train from scratch."""
        if y is None:
            X = check_texts(X)
            corpus = X
        else:
            X, y = check_pairs(X, y)
            corpus = X + y
        self.vocab_ = build_vocab(corpus, mode=self.tokenizer, max_size=self.max_vocab)
        config = ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, d_ffn=self.d_ffn,
            vocab_size=len(self.vocab_), max_positions=self.max_positions, seed=self.random_state,
            pad_id=self.vocab_.pad_id,
        )
        self.model_ = init_parameters(config)
        self.history_ = []
        self.instruction_tuned_ = False
        if y is None:
            return self._run(self.model_, self._plain(X), Phase.PRETRAIN)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y=None):
        """Continue training the fitted model on new data."""
        check_is_fitted(self, "model_")
        if y is None:
            X = check_texts(X)
            model = self.model_
            if self.lora_rank:
                if not isinstance(model, AdaptedModel):
                    alpha = self.lora_alpha if self.lora_alpha is not None else self.lora_rank
                    lcfg = LoraConfig(rank=self.lora_rank, alpha=alpha, dropout=self.lora_dropout)
                    model = attach(model, lcfg, seed=self.random_state)
                return self._run(model, self._plain(X), Phase.CPT)
            if isinstance(model, AdaptedModel):
                model = merge(model)
            return self._run(model, self._plain(X), Phase.PRETRAIN)
        X, y = check_pairs(X, y)
        model = merge(self.model_) if isinstance(self.model_, AdaptedModel) else self.model_
        response_len = self.response_len or self.max_new_tokens
        dataset = [format_sft_pair(self.vocab_, a, b, self.max_positions, response_len=response_len)
                   for a, b in zip(X, y)]
        self.instruction_tuned_ = True
        return self._run(model, dataset, Phase.SFT)

    def predict(self, X) -> list[str]:
        """Generate a completion (or an instruction response) for each prompt."""
        check_is_fitted(self, "model_")
        X = check_texts(X, allow_empty_strings=True)
        cfg = self._generator_config()
        fmt = format_prompt if self.instruction_tuned_ else encode
        out = []
        for x in X:
            prompt = fmt(self.vocab_, x)
            seq = generate(self.model_, prompt, cfg, mask_id=self.vocab_.mask_id)
            out.append(self.vocab_.decode(truncate_at_eos(seq.ids[len(prompt):], self.vocab_.eos_id)))
        return out

    def perplexity(self, X) -> float:
        check_is_fitted(self, "model_")
        docs = [encode(self.vocab_, x) for x in check_texts(X)]
        cfg = EvalConfig(mask_prob=self.mask_prob, max_len=self.model_.config.max_positions,
                         seed=self.random_state, num_rounds=self.eval_rounds)
        return evaluate(self.model_, docs, cfg, mask_id=self.vocab_.mask_id, pad_id=self.vocab_.pad_id).ppl

    def score(self, X, y=None) -> float:
        return -math.log(self.perplexity(X))
