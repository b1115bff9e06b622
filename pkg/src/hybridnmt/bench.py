"""Wall-clock throughput of the execution strategies on virtual devices."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

from .model import N_RESERVED, Batch, ModelConfig, init_params
from .parallel.placement import Strategy
from .parallel.strategies import plan_for, run_strategy, strategy_variant
from .simulator import MEMORY_BATCH_CAPS
from .tensor import Rng


@dataclass
class BenchRow:
    strategy: str
    src_tokens_per_sec: float
    scaling_factor: float
    batch_size: int
    seconds: float


def random_batch(config: ModelConfig, batch_size: int, length: int, seed: int) -> Batch:
    rng = Rng(seed).child(23, batch_size, length)
    src = rng.integers(N_RESERVED, config.vocab_size, size=(batch_size, length))
    tgt = rng.integers(N_RESERVED, config.vocab_size, size=(batch_size, length))
    return Batch.from_pairs([(list(s), list(t)) for s, t in zip(src, tgt)])


def measure(strategy, config: ModelConfig, batch_size: int, length: int = 10, steps: int = 3,
            seed: int = 1) -> tuple[float, float]:
    """``(source tokens per second, seconds)`` over ``steps`` forward-backward passes.

    One untimed warm-up pass runs first.
    """
    strategy = Strategy(strategy)
    cfg = config.replace(variant=strategy_variant(strategy, config.variant))
    plan = plan_for(strategy, cfg)
    params = init_params(cfg, seed)
    batch = random_batch(cfg, batch_size, length, seed)
    run_strategy(plan, params, batch, cfg)
    t0 = time.perf_counter()
    for _ in range(steps):
        run_strategy(plan, params, batch, cfg)
    secs = time.perf_counter() - t0
    return batch.src_tokens * steps / secs, secs


def bench(strategies, config: ModelConfig, length: int = 10, steps: int = 3, seed: int = 1,
          batch_sizes: dict | None = None) -> list[BenchRow]:
    """Throughput of each strategy at its memory-capped batch size, scaled by the serial run."""
    caps = dict(MEMORY_BATCH_CAPS)
    caps.update(batch_sizes or {})
    strategies = [Strategy.parse(s) if isinstance(s, str) else Strategy(s) for s in strategies]
    results = {}
    for s in dict.fromkeys([Strategy.SERIAL, *strategies]):
        results[s] = measure(s, config, caps[s], length, steps, seed)
    base = results[Strategy.SERIAL][0]
    return [BenchRow(s.value, results[s][0], results[s][0] / base, caps[s], results[s][1])
            for s in strategies]


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


__all__ = ["BenchRow", "bench", "measure", "random_batch", "cpu_count"]
