"""Greedy and beam-search decoding, and corpus BLEU.

Decoders talk to a *step model*: ``start(src_ids)`` returns an opaque state
and ``step(state, token)`` returns ``(log_probs over the vocabulary, new
state)``. :class:`NMTStepper` wraps trained parameters; tests use small
hand-built tables.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import BOS, EOS, PAD, ModelConfig, check_ids, lstm_cell


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple          # after BOS; ends with EOS when finished by EOS
    log_prob: float
    finished: bool
    normalized_score: float


def length_normalizer(n: int, penalty: float) -> float:
    return float(n) ** penalty if n > 0 else 1.0


def _hyp(tokens, logp, finished, penalty):
    return Hypothesis(tuple(tokens), float(logp), finished,
                      float(logp) / length_normalizer(len(tokens), penalty))


class NMTStepper:
    """Incremental decoder over trained parameters (one sentence at a time)."""

    def __init__(self, params: dict, config: ModelConfig):
        self.params, self.config = params, config

    def start(self, src_ids):
        p, cfg = self.params, self.config
        src = np.asarray(src_ids, dtype=np.int64)
        if src.ndim != 1 or src.size == 0:
            raise ValueError("source must be a nonempty 1-D id sequence")
        check_ids(src, cfg.vocab_size)
        dt, H = cfg.dtype, cfg.hidden_size
        state = [(np.zeros((1, H), dt), np.zeros((1, H), dt)) for _ in range(cfg.depth)]
        tops = []
        for tok in src:
            x = p["src_emb"][tok][None]
            for l in range(cfg.depth):
                names = (f"enc{l + 1}.wx", f"enc{l + 1}.wh", f"enc{l + 1}.b")
                state[l] = lstm_cell(x, *state[l], *(p[n] for n in names))
                x = state[l][0]
            tops.append(x[0])
        S = np.stack(tops)                       # (M, H)
        feed = np.zeros((1, H), dt) if cfg.input_feeding else None
        return (S, S @ p["attn.w_alpha"].T, state, feed)

    def step(self, st, token: int):
        p, cfg = self.params, self.config
        S, SW, state, feed = st
        state = list(state)
        x = p["tgt_emb"][int(token)][None]
        if cfg.input_feeding:
            x = np.concatenate([x, feed], axis=-1)
        for l in range(cfg.depth):
            names = (f"dec{l + 1}.wx", f"dec{l + 1}.wh", f"dec{l + 1}.b")
            state[l] = lstm_cell(x, *state[l], *(p[n] for n in names))
            x = state[l][0]
        alpha = T.softmax_rows(x @ SW.T)          # (1, M)
        hc = np.tanh(np.concatenate([x, alpha @ S], axis=-1) @ p["attn.w_c"].T)
        logp = T.log_softmax_rows(hc @ p["out.w"] + p["out.b"])[0].astype(np.float64)
        logp[[PAD, BOS]] = -np.inf
        return logp, (S, SW, state, hc if cfg.input_feeding else None)


def greedy_decode(model, src_ids, max_len: int, length_penalty: float = 1.0) -> Hypothesis:
    """Arg-max token per step (lowest id on ties) until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    st = model.start(src_ids)
    tokens, logp, tok = [], 0.0, BOS
    while len(tokens) < max_len:
        lp, st = model.step(st, tok)
        tok = int(np.argmax(lp))
        tokens.append(tok)
        logp += float(lp[tok])
        if tok == EOS:
            break
    return _hyp(tokens, logp, True, length_penalty)


def beam_search(model, src_ids, beam_size: int, length_penalty: float = 1.0,
                max_len: int = 50) -> Hypothesis:
    """Beam search with a pool of finished hypotheses.

    Each step expands every live beam, keeps the ``beam_size`` best
    expansions by log-probability (ties: lexicographically smaller token
    sequence), and moves those ending in EOS or reaching ``max_len`` to the
    pool. The result is the pool entry with the best ``log_prob / n**p``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    root = model.start(src_ids)
    live = [((), 0.0, root, BOS)]
    pool: list[Hypothesis] = []
    while live:
        cands = []
        for tokens, logp, st, last in live:
            lp, nst = model.step(st, last)
            for tok in np.flatnonzero(np.isfinite(lp)):
                cands.append((logp + float(lp[tok]), tokens + (int(tok),), nst))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for logp, tokens, nst in cands[:beam_size]:
            if tokens[-1] == EOS or len(tokens) >= max_len:
                pool.append(_hyp(tokens, logp, True, length_penalty))
            else:
                live.append((tokens, logp, nst, tokens[-1]))
    return best_of(pool)


def best_of(hyps) -> Hypothesis:
    return min(hyps, key=lambda h: (-h.normalized_score, h.tokens))


def enumerate_sequences(model, src_ids, max_len: int, length_penalty: float = 1.0):
    """Every complete output up to ``max_len`` tokens (exponential; for tests)."""
    out = []

    def walk(st, last, tokens, logp):
        lp, nst = model.step(st, last)
        for tok in np.flatnonzero(np.isfinite(lp)):
            seq, total = tokens + (int(tok),), logp + float(lp[tok])
            if tok == EOS or len(seq) >= max_len:
                out.append(_hyp(seq, total, True, length_penalty))
            else:
                walk(nst, int(tok), seq, total)

    walk(model.start(src_ids), BOS, (), 0.0)
    return out


def strip_special(tokens) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t not in (PAD, BOS):
            out.append(int(t))
    return out


# ----------------------------------------------------------------------- BLEU


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU-4 (no smoothing) times 100; sentences are token lists or strings."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h = h.split() if isinstance(h, str) else list(h)
        r = r.split() if isinstance(r, str) else list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)
