"""Vocabulary, parallel corpora, toy tasks and length-bucketed batching."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np

from .model import BOS, EOS, N_RESERVED, PAD, UNK, Batch
from .tensor import Rng

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
BUCKET_WIDTH = 4


class Vocab:
    """Token/id bijection with ids 0..3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[N_RESERVED:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls([line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()
                    if line.strip()])


def _lines(source):
    if isinstance(source, (str, Path)):
        return Path(source).read_text(encoding="utf-8").splitlines()
    return list(source)


def build_vocab(sources, max_size: int) -> Vocab:
    """Keep the ``max_size - 4`` most frequent tokens (ties: lexicographic).

    ``sources`` holds file paths or iterables of lines.
    """
    if max_size < N_RESERVED:
        raise ValueError(f"max_size must be >= {N_RESERVED}")
    if isinstance(sources, (str, Path)):
        sources = [sources]
    counts: Counter = Counter()
    for src in sources:
        for line in _lines(src):
            counts.update(line.split())
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, _ in ranked[:max_size - N_RESERVED]])


def gen_toy_corpus(task: str, n_sentences: int, max_len: int, vocab_size: int,
                   seed: int) -> tuple[list[str], list[str]]:
    """Random source sentences over ``w4 .. w{V-1}``; target is a copy or the reversal."""
    if task not in ("copy", "reverse"):
        raise ValueError(f"unknown toy task {task!r}")
    if vocab_size < N_RESERVED + 1:
        raise ValueError("vocab_size must be >= 5")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = Rng(seed).child(7, 0 if task == "copy" else 1)
    src, tgt = [], []
    for _ in range(n_sentences):
        n = int(rng.integers(1, max_len + 1))
        words = [f"w{int(k)}" for k in rng.integers(N_RESERVED, vocab_size, size=n)]
        src.append(" ".join(words))
        tgt.append(" ".join(words if task == "copy" else words[::-1]))
    return src, tgt


def write_lines(path, lines) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def toy_vocab(vocab_size: int) -> Vocab:
    return Vocab([f"w{k}" for k in range(N_RESERVED, vocab_size)])


def encode_pairs(src_lines, tgt_lines, src_vocab: Vocab, tgt_vocab: Vocab | None = None):
    tgt_vocab = tgt_vocab or src_vocab
    src_lines, tgt_lines = _lines(src_lines), _lines(tgt_lines)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"{len(src_lines)} source lines vs {len(tgt_lines)} target lines")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        if s.split():
            pairs.append((src_vocab.encode(s), tgt_vocab.encode(t)))
    return pairs


def make_batches(pairs, batch_size: int, rng: Rng | None = None) -> list[Batch]:
    """Bucket by source length (buckets ``BUCKET_WIDTH`` tokens wide) and chunk.

    With ``rng``, sentences are shuffled inside buckets and the batch order is
    shuffled; without it the order is deterministic by length.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    buckets: dict[int, list] = {}
    for i, (s, _) in enumerate(pairs):
        buckets.setdefault((len(s) - 1) // BUCKET_WIDTH, []).append(i)
    chunks = []
    for key in sorted(buckets):
        idx = np.array(buckets[key])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        for a in range(0, len(idx), batch_size):
            chunks.append(idx[a:a + batch_size])
    if rng is not None:
        chunks = [chunks[k] for k in rng.permutation(len(chunks))]
    return [Batch.from_pairs([pairs[i] for i in c]) for c in chunks]
