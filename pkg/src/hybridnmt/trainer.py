"""Adam, the dev-perplexity learning-rate decay, and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import make_batches
from .model import Batch, Dropout, ModelConfig, build_loss_sum
from .parallel.placement import PlacementPlan, Strategy, build_placement
from .parallel.strategies import run_strategy
from .tensor import NonFiniteError, Rng


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, lr: float = 0.001, **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, **kw)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> tuple[dict, OptimizerState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise KeyError("params, grads and optimizer state have different keys")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict, threshold: float) -> dict:
    """Scale all gradients so their joint L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    k = threshold / norm
    eps = max(np.finfo(g.dtype).eps for g in grads.values())
    while True:
        out = {n: (g * k).astype(g.dtype) for n, g in grads.items()}
        if global_norm(out) <= threshold:
            return out
        k *= 1.0 - 2.0 * eps  # rounding pushed the norm over; shrink by a few ulps


@dataclass
class TrainState:
    opt: OptimizerState
    epoch: int = 0
    batches_seen: int = 0
    dev_ppl_history: list = field(default_factory=list)
    decay_interval: int = 50
    decay: float = 0.7
    tokens_processed: int = 0
    wall_time: float = 0.0

    @property
    def lr(self) -> float:
        return self.opt.lr


def maybe_decay_lr(state: TrainState, new_dev_ppl: float) -> TrainState:
    """Multiply the learning rate by ``state.decay`` if dev perplexity went up."""
    hist = state.dev_ppl_history
    if hist and new_dev_ppl > hist[-1]:
        state.opt.lr *= state.decay
    hist.append(float(new_dev_ppl))
    return state


def perplexity(params: dict, dataset, config: ModelConfig, batch_size: int = 64) -> float:
    """exp(total NLL / target tokens) over ``(src_ids, tgt_ids)`` pairs, no dropout."""
    batches = dataset if dataset and isinstance(dataset[0], Batch) else \
        make_batches(list(dataset), batch_size)
    if not batches:
        raise ValueError("perplexity of an empty dataset")
    total, n = 0.0, 0
    for b in batches:
        tape = ag.Tape()
        total += float(build_loss_sum(tape, params, config, b).value)
        n += b.tgt_tokens
    if n == 0:
        raise ValueError("dataset has no target tokens")
    return math.exp(total / n)


@dataclass
class TrainResult:
    params: dict
    state: TrainState
    records: list


def train(params: dict, config: ModelConfig, plan: PlacementPlan, train_pairs, dev_pairs, *,
          batch_size: int = 64, epochs: int = 30, seed: int = 1, lr: float = 0.001,
          eval_every: int = 50, decay: float = 0.7, clip_norm: float = 0.0,
          max_batches: int = 0, baseline_tps: float | None = None, sink=None,
          target_ppl: float | None = None, dev_ppl_fn=None) -> TrainResult:
    """Train with ``run_strategy`` and Adam, evaluating dev perplexity every ``eval_every``
    batches and once at the end of every epoch.

    Each evaluation emits a record ``{batches, loss, devPpl, lr, srcTokensPerSec,
    scalingFactor}`` to ``sink`` (a callable or a text file) and to the returned list.
    ``scalingFactor`` is relative to ``baseline_tps``; a one-device serial run is its
    own baseline. ``target_ppl`` stops training once dev perplexity falls below it.
    ``dev_ppl_fn(params, state)`` replaces the dev evaluation (used to inject values).
    """
    state = TrainState(OptimizerState.for_params(params, lr), decay_interval=eval_every,
                       decay=decay)
    rng = Rng(seed).child(11)
    records: list = []
    losses: list = []
    step_seconds, src_tokens = 0.0, 0
    if baseline_tps is None and plan.strategy is Strategy.SERIAL:
        baseline_tps = "self"

    def evaluate():
        ppl = (dev_ppl_fn(params, state) if dev_ppl_fn else
               perplexity(params, dev_pairs, config, batch_size))
        maybe_decay_lr(state, ppl)
        tps = src_tokens / step_seconds if step_seconds > 0 else 0.0
        base = tps if baseline_tps == "self" else baseline_tps
        rec = {"batches": state.batches_seen, "epoch": state.epoch,
               "loss": float(np.mean(losses)) if losses else float("nan"),
               "devPpl": ppl, "lr": state.opt.lr, "srcTokensPerSec": tps,
               "scalingFactor": (1.0 if baseline_tps == "self" else
                                 tps / base if base else None)}
        records.append(rec)
        if sink is not None:
            if callable(sink):
                sink(rec)
            else:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
        losses.clear()
        return ppl

    serial_plan = build_placement(Strategy.SERIAL, 1, config)
    t_start = time.perf_counter()
    done = False
    for epoch in range(epochs):
        state.epoch = epoch + 1
        batches = make_batches(list(train_pairs), batch_size, rng)
        for batch in batches:
            # a batch too small to shard runs on one device; the result is the same
            step_plan = serial_plan if len(batch) < plan.n_devices else plan
            drop = Dropout(config.dropout, seed, state.batches_seen) if config.dropout else None
            t0 = time.perf_counter()
            try:
                res = run_strategy(step_plan, params, batch, config, drop)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite values at batch {state.batches_seen}") from e
            step_seconds += time.perf_counter() - t0
            if not math.isfinite(res.loss):
                raise DivergenceError(f"loss became {res.loss} at batch {state.batches_seen}")
            grads = clip_by_global_norm(res.grads, clip_norm) if clip_norm > 0 else res.grads
            params, state.opt = adam_step(params, grads, state.opt)
            src_tokens += batch.src_tokens
            state.tokens_processed += batch.src_tokens
            state.batches_seen += 1
            losses.append(res.loss)
            if state.batches_seen % eval_every == 0:
                ppl = evaluate()
                if target_ppl is not None and ppl < target_ppl:
                    done = True
            if done or (max_batches and state.batches_seen >= max_batches):
                done = True
                break
        if done:
            break
        if state.batches_seen % eval_every:
            ppl = evaluate()
            if target_ppl is not None and ppl < target_ppl:
                break
    state.wall_time = time.perf_counter() - t_start
    return TrainResult(params, state, records)
