"""Character/word vocabularies with reserved special tokens.

The mask token is the absorbing state of the forward process and is never
produced by :func:`encode`.  The instruction scaffold tokens let the SFT
masking mode find the response region by label instead of string matching.
"""

from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MASK = "<mask>"
PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
INSTR_OPEN = "<instr>"
INSTR_CLOSE = "</instr>"
RESP_OPEN = "<resp>"

SPECIAL_TOKENS = (MASK, PAD, BOS, EOS, UNK, INSTR_OPEN, INSTR_CLOSE, RESP_OPEN)
SPECIAL_NAMES = ("MASK", "PAD", "BOS", "EOS", "UNK", "INSTR_OPEN", "INSTR_CLOSE", "RESP_OPEN")

_WORD_RE = re.compile(r"\w+|\s+|[^\w\s]", re.UNICODE)


class Region(enum.IntEnum):
    PLAIN = 0
    PROMPT = 1
    RESPONSE = 2


def split_symbols(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        # whitespace runs are symbols too, so joining reproduces the text
        return _WORD_RE.findall(text)
    raise ValueError(f"unknown tokenizer mode {mode!r}; expected 'char' or 'word'")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mode: str = "char"
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        id_of = {tok: i for i, tok in enumerate(self.tokens)}
        if len(id_of) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        missing = [s for s in SPECIAL_TOKENS if s not in id_of]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        object.__setattr__(self, "id_of", id_of)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return self.id_of[MASK]

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    @property
    def bos_id(self) -> int:
        return self.id_of[BOS]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS]

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]

    @property
    def specials(self) -> dict[str, int]:
        return {name: self.id_of[tok] for name, tok in zip(SPECIAL_NAMES, SPECIAL_TOKENS)}

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.id_of[tok] for tok in SPECIAL_TOKENS)

    def decode(self, ids: Iterable[int], *, skip_special: bool = True, mask_char: str | None = None) -> str:
        """Join token strings back into text.

        With ``skip_special`` all specials are dropped except that MASK is
        rendered as ``mask_char`` when one is given.
        """
        out = []
        special = self.special_ids
        for i in ids:
            i = int(i)
            if mask_char is not None and i == self.mask_id:
                out.append(mask_char)
            elif skip_special and i in special:
                continue
            else:
                out.append(self.tokens[i])
        return "".join(out)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(tuple(data["tokens"]), mode=data.get("mode", "char"))

    def save(self, path: str | Path) -> None:
        """Write the vocabulary file.

        Layout: a ``[header]`` section of ``key = value`` lines (mode, size and
        every special id), then ``[tokens]`` with one JSON-quoted token per line
        in id order.  Quoting keeps whitespace tokens unambiguous.
        """
        lines = ["[header]", f"mode = {self.mode}", f"size = {len(self)}"]
        lines += [f"{name} = {idx}" for name, idx in self.specials.items()]
        lines.append("[tokens]")
        lines += [json.dumps(tok, ensure_ascii=False) for tok in self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        header: dict[str, str] = {}
        tokens: list[str] = []
        section = None
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if line in ("[header]", "[tokens]"):
                section = line
            elif section == "[header]":
                if not line.strip():
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: malformed header line {line!r}")
                header[key.strip()] = value.strip()
            elif section == "[tokens]":
                tokens.append(json.loads(line))
            else:
                raise ValueError(f"{path}:{lineno}: content outside any section")
        vocab = cls(tuple(tokens), mode=header.get("mode", "char"))
        if "size" in header and int(header["size"]) != len(vocab):
            raise ValueError(f"{path}: header size {header['size']} but {len(vocab)} tokens")
        for name, idx in vocab.specials.items():
            if name in header and int(header[name]) != idx:
                raise ValueError(f"{path}: header says {name}={header[name]}, token list says {idx}")
        return vocab


@dataclass
class TokenSequence:
    """Token ids with per-position mask flags and region labels."""

    ids: list[int]
    masked: list[bool] = None
    region: list[Region] = None

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        n = len(self.ids)
        if self.masked is None:
            self.masked = [False] * n
        if self.region is None:
            self.region = [Region.PLAIN] * n
        self.masked = [bool(m) for m in self.masked]
        self.region = [Region(r) for r in self.region]
        if not (len(self.masked) == len(self.region) == n):
            raise ValueError(
                f"length mismatch: ids={n}, masked={len(self.masked)}, region={len(self.region)}"
            )

    def __len__(self) -> int:
        return len(self.ids)

    def check_masks(self, mask_id: int) -> None:
        for i, (tok, m) in enumerate(zip(self.ids, self.masked)):
            if m and tok != mask_id:
                raise ValueError(f"position {i} flagged masked but holds id {tok}")

    def copy(self) -> "TokenSequence":
        return TokenSequence(list(self.ids), list(self.masked), list(self.region))


def build_vocab(corpus: str | Iterable[str], mode: str = "char", max_size: int = 512) -> Vocabulary:
    """Build a vocabulary from text.

    Specials take ids ``0..7``; the remaining slots go to the most frequent
    symbols, ties broken by first occurrence.
    """
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed the {len(SPECIAL_TOKENS)} special tokens, got {max_size}")
    lines = [corpus] if isinstance(corpus, str) else list(corpus)
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for line in lines:
        for sym in split_symbols(line, mode):
            counts[sym] += 1
            first_seen.setdefault(sym, len(first_seen))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda s: (-counts[s], first_seen[s]))
    ranked = [s for s in ranked if s not in SPECIAL_TOKENS]
    room = max_size - len(SPECIAL_TOKENS)
    return Vocabulary(SPECIAL_TOKENS + tuple(ranked[:room]), mode=mode)


def encode(vocab: Vocabulary, text: str) -> TokenSequence:
    unk = vocab.unk_id
    special = vocab.special_ids
    ids = []
    for sym in split_symbols(text, vocab.mode):
        idx = vocab.id_of.get(sym, unk)
        # a literal "<mask>" in word mode must not become the absorbing state
        ids.append(unk if idx in special else idx)
    return TokenSequence(ids)


def format_sft_pair(
    vocab: Vocabulary,
    instruction: str,
    response: str,
    max_len: int,
    *,
    response_len: int | None = None,
) -> TokenSequence:
    """Lay out ``INSTR_OPEN instr INSTR_CLOSE RESP_OPEN response EOS``.

    The scaffold (everything up to and including ``RESP_OPEN``) is PROMPT; the
    response and its EOS are RESPONSE.  Overlong responses lose their tail but
    keep the terminal EOS.

    ``response_len`` fixes the RESPONSE region to exactly that many tokens,
    filling with trailing EOS, so a model learns to emit EOS into the unused
    part of a fixed-length generation window.
    """
    prompt = [vocab.id_of[INSTR_OPEN]] + encode(vocab, instruction).ids
    prompt += [vocab.id_of[INSTR_CLOSE], vocab.id_of[RESP_OPEN]]
    room = max_len - len(prompt)
    if room < 1:
        raise ValueError(
            f"instruction scaffold needs {len(prompt)} tokens plus EOS but max_len is {max_len}"
        )
    body = encode(vocab, response).ids
    if response_len is not None:
        if response_len < 1:
            raise ValueError("response_len must be at least 1 (room for EOS)")
        room = min(room, response_len)
    body = body[: room - 1] + [vocab.eos_id]
    if response_len is not None:
        body += [vocab.eos_id] * (room - len(body))
    ids = prompt + body
    region = [Region.PROMPT] * len(prompt) + [Region.RESPONSE] * len(body)
    return TokenSequence(ids, region=region)


def format_prompt(vocab: Vocabulary, instruction: str) -> TokenSequence:
    """The PROMPT half of :func:`format_sft_pair`, used to condition generation."""
    ids = [vocab.id_of[INSTR_OPEN]] + encode(vocab, instruction).ids
    ids += [vocab.id_of[INSTR_CLOSE], vocab.id_of[RESP_OPEN]]
    return TokenSequence(ids, region=[Region.PROMPT] * len(ids))


def read_lines(path: str | Path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int) -> list[list[int]]:
    width = max(len(s) for s in seqs)
    return [s.ids + [pad_id] * (width - len(s)) for s in seqs]
