"""Corpus curation: length filter, merge/shuffle/sample, provenance report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import Vocabulary, encode, read_lines


@dataclass(frozen=True)
class CorpusRecord:
    text: str
    source: str
    token_len: int

    @classmethod
    def from_text(cls, vocab: Vocabulary, text: str, source: str) -> "CorpusRecord":
        return cls(text, source, len(encode(vocab, text)))


@dataclass
class CurationReport:
    before: dict[str, int] = field(default_factory=dict)
    after: dict[str, int] = field(default_factory=dict)
    sampled: dict[str, int] = field(default_factory=dict)
    total: int = 0
    seed: int | None = None
    max_len: int | None = None

    def filtered_fraction(self, source: str) -> float:
        n = self.before.get(source, 0)
        return 0.0 if n == 0 else 1.0 - self.after.get(source, 0) / n

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def load_records(vocab: Vocabulary, path: str | Path, source: str | None = None) -> list[CorpusRecord]:
    source = source or Path(path).stem
    return [CorpusRecord.from_text(vocab, line, source) for line in read_lines(path)]


def filter_by_length(records: Iterable[CorpusRecord], max_len: int) -> list[CorpusRecord]:
    """Drop records longer than ``max_len`` tokens; a record of exactly ``max_len`` stays."""
    if max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    return [r for r in records if r.token_len <= max_len]


def seeded_permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of ``range(n)`` driven by a seeded PCG64 stream."""
    rng = np.random.default_rng(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def merge_shuffle_sample(pools: Sequence[Sequence[CorpusRecord]], n: int, seed: int) -> list[CorpusRecord]:
    merged = [r for pool in pools for r in pool]
    if n < 0 or n > len(merged):
        raise ValueError(f"cannot sample {n} records from a merged pool of {len(merged)}")
    perm = seeded_permutation(len(merged), seed)
    return [merged[i] for i in perm[:n]]


def _counts(records: Iterable[CorpusRecord]) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in records:
        out[r.source] = out.get(r.source, 0) + 1
    return out


def assemble_corpus(
    encyclopedic: Sequence[CorpusRecord],
    web_news: Sequence[Sequence[CorpusRecord]],
    n_sample: int,
    max_len: int,
    seed: int,
) -> tuple[list[CorpusRecord], CurationReport]:
    """Filtered encyclopedic records followed by ``n_sample`` filtered web/news records."""
    if not encyclopedic and not any(web_news):
        raise ValueError("assemble_corpus needs at least one non-empty input")
    report = CurationReport(seed=seed, max_len=max_len)
    enc = filter_by_length(encyclopedic, max_len)
    pools = [filter_by_length(pool, max_len) for pool in web_news]
    report.before = _counts([*encyclopedic, *(r for p in web_news for r in p)])
    report.after = _counts([*enc, *(r for p in pools for r in p)])
    sampled = merge_shuffle_sample(pools, n_sample, seed) if n_sample else []
    out = enc + sampled
    report.sampled = {**_counts(enc), **_counts(sampled)}
    for src in report.before:
        report.after.setdefault(src, 0)
        report.sampled.setdefault(src, 0)
    report.total = len(out)
    return out, report


def write_manifest(records: Iterable[CorpusRecord], path: str | Path) -> None:
    lines = [f"{r.source}\t{r.text}" for r in records]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        source, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: manifest line lacks a source<TAB> prefix")
        out.append((source, text))
    return out
