"""Command-line entry point: ``mdlm {vocab,corpus,train,generate,eval,inspect}``."""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .corpus import assemble_corpus, load_records, read_manifest, write_manifest
from .evaluation import EvalConfig, evaluate
from .generator import GeneratorConfig, generate_with_trace, truncate_at_eos
from .lora import AdaptedModel, LoraConfig, attach, merge
from .model import ModelConfig, init_parameters
from .trainer import Phase, TrainConfig, train
from .vocab import Vocabulary, build_vocab, encode, format_prompt, format_sft_pair, read_lines

log = logging.getLogger("mdlm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock so reruns produce identical manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else time.time()
    return dt.datetime.fromtimestamp(t, dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Run:
    """Collects what one subcommand read, resolved and wrote."""

    def __init__(self, command: list[str], manifest: str | None):
        self.command = command
        self.manifest = manifest
        self.started = _timestamp()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed = None

    def read(self, path) -> str:
        path = str(path)
        self.inputs[path] = _sha256(path)
        return path

    def wrote(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self) -> None:
        if not self.manifest:
            return
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "seed": self.seed,
            "started": self.started,
            "finished": _timestamp(),
            "outputs": {p: _sha256(p) for p in self.outputs},
        }
        Path(self.manifest).write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                       encoding="utf-8")


# ---------------------------------------------------------------- helpers

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _read_documents(path) -> list[str]:
    lines = read_lines(path)
    if lines and all("\t" in ln for ln in lines):
        return [text for _, text in read_manifest(path)]
    return lines


def _read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        try:
            pairs.append((row["instruction"], row["response"]))
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return pairs


def _flags(args, mapping: dict[str, str]) -> dict:
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


# ---------------------------------------------------------------- vocab

def _raw_config(args, run: Run) -> dict:
    if getattr(args, "config", None):
        return C.read_ini(run.read(args.config))
    if getattr(args, "preset", None):
        return C.read_ini(C.preset_path(args.preset))
    return {}


def cmd_vocab_build(args, run: Run) -> int:
    sec = C.section(_raw_config(args, run), "vocab")
    mode = args.mode or sec.get("mode", "char")
    max_size = args.max_size or int(sec.get("max_size", 512))
    lines = []
    for path in args.inputs:
        lines += read_lines(run.read(path))
    vocab = build_vocab(lines, mode=mode, max_size=max_size)
    vocab.save(args.out)
    run.wrote(args.out)
    run.config = {"mode": mode, "max_size": max_size}
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return 0


# ---------------------------------------------------------------- corpus

def cmd_corpus_prep(args, run: Run) -> int:
    vocab = Vocabulary.load(run.read(args.vocab))
    enc = [r for p in args.encyclopedic for r in load_records(vocab, run.read(p))]
    pools = [load_records(vocab, run.read(p)) for p in args.web]
    records, report = assemble_corpus(enc, pools, args.sample, args.max_len, args.seed)
    write_manifest(records, args.out)
    run.wrote(args.out)
    report_path = args.report or f"{args.out}.report.json"
    Path(report_path).write_text(report.to_text(), encoding="utf-8")
    run.wrote(report_path)
    run.seed = args.seed
    run.config = {"max_len": args.max_len, "sample": args.sample, "seed": args.seed}
    print(f"wrote {report.total} records to {args.out}")
    return 0


# ---------------------------------------------------------------- train

def _load_init(path, run: Run):
    ckpt = load_checkpoint(run.read(path))
    model = ckpt.model()
    return (merge(model) if isinstance(model, AdaptedModel) else model), ckpt.vocab


def cmd_train(args, run: Run) -> int:
    raw = _raw_config(args, run)
    phase = Phase(args.phase)
    overlay = phase.value if phase is not Phase.SFT else f"sft{args.stage}"
    data = C.section(raw, "data", overlay)
    data.update(_flags(args, {"data": "corpus" if phase is not Phase.SFT else f"sft{args.stage}",
                              "vocab": "vocab", "init": "init"}))

    vocab = None
    base = None
    if data.get("init"):
        base, vocab = _load_init(data["init"], run)
    if data.get("vocab"):
        vocab = Vocabulary.load(run.read(data["vocab"]))
    if vocab is None:
        raise UsageError("no vocabulary: pass --vocab or an --init checkpoint that embeds one")

    model_cfg = C.build(ModelConfig, C.section(raw, "model"),
                        {"vocab_size": len(vocab), "pad_id": vocab.pad_id})
    if base is None:
        base = init_parameters(model_cfg)
    elif base.config.vocab_size != len(vocab):
        raise UsageError(f"init checkpoint has vocab_size {base.config.vocab_size}, vocabulary has {len(vocab)}")

    train_cfg = C.build(
        TrainConfig,
        C.section(raw, "train", overlay),
        {"phase": phase.value},
        _flags(args, {"steps": "total_steps", "epochs": "epochs", "lr": "peak_lr", "seed": "seed",
                      "micro_batch": "micro_batch", "grad_accum": "grad_accum", "warmup": "warmup_steps"}),
    )
    if args.steps is not None and args.warmup is None and "warmup_steps" not in C.section(raw, "train", overlay):
        train_cfg = replace(train_cfg, warmup_steps=None)

    key = "corpus" if phase is not Phase.SFT else f"sft{args.stage}"
    if not data.get(key):
        raise UsageError(f"no training data: set [data] {key} in the config or pass --data")
    max_len = min(int(data.get("max_len", base.config.max_positions)), base.config.max_positions)
    if phase is Phase.SFT:
        response_len = data.get("response_len")
        dataset = []
        dropped = 0
        for instr, resp in _read_pairs(run.read(data[key])):
            try:
                dataset.append(format_sft_pair(vocab, instr, resp, max_len,
                                               response_len=int(response_len) if response_len else None))
            except ValueError:
                dropped += 1
        if dropped:
            log.warning("dropped %d pair(s) whose instruction exceeds max_len=%d", dropped, max_len)
    else:
        dataset = [encode(vocab, t) for t in _read_documents(run.read(data[key]))]
        dataset = [s if len(s) <= max_len else type(s)(s.ids[:max_len]) for s in dataset]

    if phase is Phase.CPT:
        lora_cfg = C.build(LoraConfig, C.section(raw, "lora"))
        model = attach(base, lora_cfg, seed=train_cfg.seed)
    else:
        lora_cfg = None
        model = base

    out = Path(args.out)
    metrics = args.metrics or f"{out}.metrics.csv"
    result = train(model, dataset, train_cfg, vocab=vocab, metrics_path=metrics, checkpoint_path=out,
                   extra_header={"phase": phase.value})
    run.wrote(out)
    run.wrote(metrics)
    resolved = train_cfg.resolved(len(dataset))
    run.seed = resolved.seed
    run.config = {"model": base.config.to_dict(), "train": resolved.to_dict(),
                  "lora": lora_cfg.to_dict() if lora_cfg else None, "data": dict(sorted(data.items()))}
    last = result.log[-1] if result.log else (0, 0.0, float("nan"))
    print(f"{phase.value}: {len(result.log)} steps, final loss {last[2]:.4f}, wrote {out}")
    return 0


# ---------------------------------------------------------------- generate

GEN_FLAGS = {"steps": "steps", "max_new_tokens": "max_new_tokens", "block_len": "block_len", "temp": "temperature",
             "rep_pen": "rep_penalty", "remask": "remask", "stochastic": "stochastic", "cfg": "cfg_scale",
             "seed": "seed"}


def cmd_generate(args, run: Run) -> int:
    ckpt = load_checkpoint(run.read(args.ckpt))
    vocab = ckpt.vocab
    if vocab is None:
        raise UsageError(f"{args.ckpt} carries no vocabulary")
    raw = _raw_config(args, run)
    gen_cfg = C.build(GeneratorConfig, C.section(raw, "generate"), _flags(args, GEN_FLAGS))
    fmt = args.format
    if fmt == "auto":
        fmt = "instruction" if ckpt.header.get("phase") == "sft" else "plain"
    prompt = format_prompt(vocab, args.prompt) if fmt == "instruction" else encode(vocab, args.prompt)
    result = generate_with_trace(ckpt.model(), prompt, gen_cfg, mask_id=vocab.mask_id)
    text = vocab.decode(truncate_at_eos(result.new_ids, vocab.eos_id))
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        run.wrote(args.out)
    if args.trace:
        rows = [vocab.decode(rec.ids, mask_char="_") for rec in result.trace]
        Path(args.trace).write_text("".join(r.replace("\n", " ") + "\n" for r in rows), encoding="utf-8")
        run.wrote(args.trace)
    run.seed = gen_cfg.seed
    run.config = {"generate": gen_cfg.to_dict(), "prompt": args.prompt, "format": fmt}
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval_ppl(args, run: Run) -> int:
    ckpt = load_checkpoint(run.read(args.ckpt))
    vocab = ckpt.vocab
    if vocab is None:
        raise UsageError(f"{args.ckpt} carries no vocabulary")
    cfg = C.build(EvalConfig, C.section(_raw_config(args, run), "eval"),
                  _flags(args, {"mask_prob": "mask_prob", "max_len": "max_len", "seed": "seed", "rounds": "num_rounds"}))
    docs = [encode(vocab, t) for t in _read_documents(run.read(args.corpus))]
    result = evaluate(ckpt.model(), docs, cfg, mask_id=vocab.mask_id, pad_id=vocab.pad_id)
    print(f"{result.ppl:.6f}")
    summary = json.dumps(result.summary(), sort_keys=True)
    print(summary)
    if args.out:
        Path(args.out).write_text(summary + "\n", encoding="utf-8")
        run.wrote(args.out)
    run.seed = cfg.seed
    run.config = {"eval": {"mask_prob": cfg.mask_prob, "max_len": cfg.max_len, "seed": cfg.seed,
                           "num_rounds": cfg.num_rounds}}
    return 0


# ---------------------------------------------------------------- inspect

def cmd_inspect(args, run: Run) -> int:
    header = read_header(args.ckpt)
    print(f"checkpoint: {args.ckpt}")
    for key in ("phase", "global_step"):
        if key in header:
            print(f"{key}: {header[key]}")
    print("model_config: " + json.dumps(header.get("model_config"), sort_keys=True))
    if header.get("lora_config"):
        print("lora_config: " + json.dumps(header["lora_config"], sort_keys=True))
    if header.get("train_config"):
        print("train_config: " + json.dumps(header["train_config"], sort_keys=True))
    if header.get("vocab"):
        print(f"vocab: {len(header['vocab']['tokens'])} tokens ({header['vocab']['mode']})")
    print("tensors:")
    for entry in header.get("tensors", []):
        shape = "x".join(str(s) for s in entry["shape"])
        print(f"  {entry['name']}\t{entry['section']}\t{entry['dtype']}\t[{shape}]\t@{entry['offset']}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdlm", description="masked diffusion LM toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_manifest(sp):
        sp.add_argument("--manifest", help="run manifest path (default: next to the main output)")
        return sp

    def with_config(sp, preset=None):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--config", help="INI file; flags override its values")
        src.add_argument("--preset", choices=C.PRESETS, default=preset)

    v = sub.add_parser("vocab").add_subparsers(dest="action", required=True)
    vb = with_manifest(v.add_parser("build", help="build a vocabulary file"))
    with_config(vb)
    vb.add_argument("--mode", choices=("char", "word"))
    vb.add_argument("--max-size", type=int)
    vb.add_argument("--in", dest="inputs", action="append", required=True)
    vb.add_argument("--out", required=True)
    vb.set_defaults(func=cmd_vocab_build, primary="out")

    c = sub.add_parser("corpus").add_subparsers(dest="action", required=True)
    cp = with_manifest(c.add_parser("prep", help="filter, merge, shuffle and sample source files"))
    cp.add_argument("--vocab", required=True)
    cp.add_argument("--encyclopedic", action="append", default=[])
    cp.add_argument("--web", action="append", default=[])
    cp.add_argument("--max-len", type=int, default=512)
    cp.add_argument("--sample", type=int, required=True)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--out", required=True)
    cp.add_argument("--report")
    cp.set_defaults(func=cmd_corpus_prep, primary="out")

    t = sub.add_parser("train").add_subparsers(dest="phase", required=True)
    for phase in ("pretrain", "cpt", "sft"):
        tp = with_manifest(t.add_parser(phase))
        if phase == "sft":
            tp.add_argument("--stage", type=int, choices=(1, 2), required=True)
        with_config(tp)
        tp.add_argument("--data")
        tp.add_argument("--vocab")
        tp.add_argument("--init")
        tp.add_argument("--out", required=True)
        tp.add_argument("--metrics")
        tp.add_argument("--steps", type=int)
        tp.add_argument("--warmup", type=int)
        tp.add_argument("--epochs", type=int)
        tp.add_argument("--lr", type=float)
        tp.add_argument("--seed", type=int)
        tp.add_argument("--micro-batch", type=int)
        tp.add_argument("--grad-accum", type=int)
        tp.set_defaults(func=cmd_train, primary="out")

    g = with_manifest(sub.add_parser("generate"))
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompt", required=True)
    with_config(g, preset="long")
    g.add_argument("--format", choices=("auto", "instruction", "plain"), default="auto")
    g.add_argument("--steps", type=int)
    g.add_argument("--max-new-tokens", type=int)
    g.add_argument("--block-len", type=int)
    g.add_argument("--temp", type=float)
    g.add_argument("--rep-pen", type=float)
    g.add_argument("--remask", choices=("low_conf", "random"))
    g.add_argument("--stochastic", type=_bool)
    g.add_argument("--cfg", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--trace")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate, primary="out")

    e = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    ep = with_manifest(e.add_parser("ppl", help="masked-LM pseudo-perplexity"))
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--corpus", required=True)
    with_config(ep)
    ep.add_argument("--mask-prob", type=float)
    ep.add_argument("--max-len", type=int)
    ep.add_argument("--seed", type=int)
    ep.add_argument("--rounds", type=int)
    ep.add_argument("--out")
    ep.set_defaults(func=cmd_eval_ppl, primary="out")

    i = sub.add_parser("inspect", help="print a checkpoint header without loading tensors")
    i.add_argument("ckpt")
    i.set_defaults(func=cmd_inspect, primary=None)
    return p


def _set_threads() -> None:
    n = int(os.environ.get("MDLM_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    manifest = getattr(args, "manifest", None)
    if manifest is None and args.primary and getattr(args, args.primary, None):
        manifest = f"{getattr(args, args.primary)}.manifest.json"
    run = Run(argv, manifest)
    try:
        code = args.func(args, run)
    except (UsageError, ValueError, KeyError, FileNotFoundError, CheckpointError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mdlm: error: {msg}", file=sys.stderr)
        return 1
    run.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
