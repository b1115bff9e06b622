"""The five execution strategies expressed as segment graphs.

Keys of values passed between segments:

``h/enc/t/l``, ``c/enc/t/l``, ``h/dec/t/l``, ``c/dec/t/l``
    LSTM outputs (0-based ``t``, 1-based ``l``)
``S/k``, ``H/k``
    encoder / decoder top-layer states of shard ``k``
``hc/t/k``
    attentional state of decoder step ``t`` for shard ``k`` (input-feeding)
``nll/k``
    summed token NLL of shard ``k``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..model import (Batch, Dropout, ModelConfig, Variant, attention_block,
                     build_loss_sum, check_ids, keep_column, layer_input, lstm_layer_step,
                     output_nll)
from .engine import ExecTrace, Segment, SchedulingError, allreduce, execute
from .placement import PlacementPlan, Strategy, build_placement, lstm_device

__all__ = ["scatter_batch", "allreduce_grads", "run_strategy", "strategy_variant",
           "StrategyResult", "build_segments"]


def scatter_batch(batch, n_shards: int) -> list:
    """Split into ``n_shards`` contiguous sub-batches whose sizes differ by at most 1."""
    n = len(batch)
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    if n < n_shards:
        raise ValueError(f"cannot split a batch of {n} into {n_shards} shards")
    base, extra = divmod(n, n_shards)
    bounds, start = [], 0
    for k in range(n_shards):
        size = base + (1 if k < extra else 0)
        bounds.append((start, start + size))
        start += size
    if isinstance(batch, Batch):
        return [batch.select(np.arange(a, b)) for a, b in bounds]
    return [batch[a:b] for a, b in bounds]


def allreduce_grads(shard_grads: list[dict]) -> dict:
    """Elementwise sum over shards in shard-index order."""
    if not shard_grads:
        raise ValueError("no gradients to reduce")
    keys = list(shard_grads[0])
    for k, g in enumerate(shard_grads[1:], 1):
        if list(g) != keys and set(g) != set(keys):
            raise KeyError(f"shard {k} has parameter set {sorted(g)} != {sorted(keys)}")
        for name in keys:
            if g[name].shape != shard_grads[0][name].shape:
                raise ValueError(f"shard {k}: {name} has shape {g[name].shape}"
                                 f" != {shard_grads[0][name].shape}")
    return {name: allreduce([g[name] for g in shard_grads]) for name in keys}


def strategy_variant(strategy: Strategy, configured: Variant) -> Variant:
    """The model variant a strategy runs: HybridNMT drops input-feeding, HybridNMTIF keeps it."""
    if strategy is Strategy.HYBRID:
        return Variant.NO_INPUT_FEEDING
    if strategy is Strategy.HYBRID_IF:
        return Variant.INPUT_FEEDING
    return Variant(configured)


@dataclass
class StrategyResult:
    loss: float
    grads: dict
    trace: ExecTrace


# ------------------------------------------------------------- segment graphs


def _k(*parts) -> str:
    return "/".join(str(p) for p in parts)


def _model_segments(config: ModelConfig, batch: Batch, drop, shards):
    segs = []
    for k, (device, sub) in enumerate(shards):
        def fn(tape, ins, params, sub=sub, k=k):
            return {_k("nll", k): build_loss_sum(tape, params, config, sub, drop)}
        label = "model" if len(shards) == 1 else _k("replica", k)
        segs.append(Segment(label, device, [], [_k("nll", k)], fn, (_k("nll", k),)))
    return segs


def _lstm_segments(plan: PlacementPlan, config: ModelConfig, batch: Batch, drop,
                   feed_keys=None):
    """Wavefront LSTM cells of both sides.

    ``feed_keys(t)`` lists the attentional-state keys that decoder layer 1
    concatenates (row-wise, shard order) at step ``t`` under input-feeding.
    """
    M, L = batch.src.shape[1], config.depth
    B, Hd, dt = len(batch), config.hidden_size, config.dtype
    segs = []

    def cell(side, t, l):
        steps_prev = ([_k("h", side, t - 1, l), _k("c", side, t - 1, l)] if t > 0 else
                      [_k("h", "enc", M - 1, l), _k("c", "enc", M - 1, l)] if side == "dec"
                      else [])
        below = [_k("h", side, t, l - 1)] if l > 1 else []
        feed = list(feed_keys(t - 1)) if (side == "dec" and l == 1 and t > 0
                                           and config.input_feeding) else []
        keep = keep_column(batch, side, t)

        def fn(tape, ins, params):
            if steps_prev:
                h, c = ins[steps_prev[0]], ins[steps_prev[1]]
            else:
                h = tape.leaf(np.zeros((B, Hd), dt))
                c = tape.leaf(np.zeros((B, Hd), dt))
            f = None
            if side == "dec" and l == 1 and config.input_feeding:
                if feed:
                    parts = [ins[key] for key in feed]
                    f = parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)
                else:
                    f = tape.leaf(np.zeros((B, Hd), dt))
            x = layer_input(tape, params, side, t, l, batch, ins[below[0]] if below else None,
                            drop, f)
            h, c = lstm_layer_step(tape, params, side, l, x, h, c, keep)
            return {_k("h", side, t, l): h, _k("c", side, t, l): c}

        return Segment(_k(side, t + 1, l), lstm_device(plan, l), steps_prev + below + feed,
                       [_k("h", side, t, l), _k("c", side, t, l)], fn)

    for t in range(M):
        for l in range(1, L + 1):
            segs.append(cell("enc", t, l))
    return segs, cell


def _shards(plan: PlacementPlan, batch: Batch):
    devices = list(plan.attn_devices)
    if len(devices) > len(batch):
        devices = devices[:len(batch)]
    parts = scatter_batch(np.arange(len(batch)), len(devices))
    return list(zip(devices, parts))


def _no_feeding_segments(plan, config, batch, drop):
    segs, cell = _lstm_segments(plan, config, batch, drop)
    M, N, L = batch.src.shape[1], batch.tgt_in.shape[1], config.depth
    for t in range(N):
        for l in range(1, L + 1):
            segs.append(cell("dec", t, l))
    shards = _shards(plan, batch)
    enc_top = [_k("h", "enc", t, L) for t in range(M)]
    dec_top = [_k("h", "dec", t, L) for t in range(N)]

    # phase 1 ends with all top-layer states gathered on the state owner
    def gather(tape, ins, params):
        S = ag.stack([ins[k] for k in enc_top], axis=1)
        H = ag.stack([ins[k] for k in dec_top], axis=1)
        out = {}
        for k, (_, rows) in enumerate(shards):
            out[_k("S", k)] = ag.rows(S, rows)
            out[_k("H", k)] = ag.rows(H, rows)
        return out

    segs.append(Segment("states", plan.state_owner, enc_top + dec_top,
                        [_k(n, k) for k in range(len(shards)) for n in ("S", "H")], gather))
    # phase 2: attention-softmax, one shard per device
    for k, (device, rows) in enumerate(shards):
        sub = batch.select(rows)

        def attn(tape, ins, params, k=k, sub=sub):
            Hc = attention_block(tape, params, ins[_k("H", k)], ins[_k("S", k)], sub.src_mask)
            return {_k("nll", k): output_nll(tape, params, Hc, sub.tgt_out, sub.tgt_mask)}

        segs.append(Segment(_k("attn_softmax", k), device, [_k("S", k), _k("H", k)],
                            [_k("nll", k)], attn, (_k("nll", k),)))
    return segs


def _feeding_segments(plan, config, batch, drop):
    M, N, L = batch.src.shape[1], batch.tgt_in.shape[1], config.depth
    shards = _shards(plan, batch)

    def feed_keys(t):
        return [_k("hc", t, k) for k in range(len(shards))]

    segs, cell = _lstm_segments(plan, config, batch, drop, feed_keys)
    enc_top = [_k("h", "enc", t, L) for t in range(M)]

    def scatter_states(tape, ins, params):
        S = ag.stack([ins[k] for k in enc_top], axis=1)
        return {_k("S", k): ag.rows(S, rows) for k, (_, rows) in enumerate(shards)}

    segs.append(Segment("states", plan.state_owner, enc_top,
                        [_k("S", k) for k in range(len(shards))], scatter_states))
    for t in range(N):
        for l in range(1, L + 1):
            segs.append(cell("dec", t, l))
        for k, (device, rows) in enumerate(shards):
            mask = batch.src_mask[rows]

            def attn_step(tape, ins, params, t=t, k=k, rows=rows, mask=mask):
                Ht = ag.stack([ag.rows(ins[_k("h", "dec", t, L)], rows)], axis=1)
                hc = attention_block(tape, params, Ht, ins[_k("S", k)], mask)
                return {_k("hc", t, k): ag.take(hc, 0, axis=1)}

            segs.append(Segment(_k("att", t + 1, k), device,
                                [_k("S", k), _k("h", "dec", t, L)], [_k("hc", t, k)], attn_step))
    for k, (device, rows) in enumerate(shards):
        sub = batch.select(rows)

        def out(tape, ins, params, k=k, sub=sub):
            Hc = ag.stack([ins[_k("hc", t, k)] for t in range(N)], axis=1)
            return {_k("nll", k): output_nll(tape, params, Hc, sub.tgt_out, sub.tgt_mask)}

        segs.append(Segment(_k("softmax", k), device, [_k("hc", t, k) for t in range(N)],
                            [_k("nll", k)], out, (_k("nll", k),)))
    return segs


def build_segments(plan: PlacementPlan, config: ModelConfig, batch: Batch,
                   drop: Dropout | None = None) -> list[Segment]:
    s = plan.strategy
    if s is Strategy.SERIAL:
        return _model_segments(config, batch, drop, [(0, batch)])
    if s is Strategy.DATA_PARALLEL:
        subs = scatter_batch(batch, plan.n_devices)
        return _model_segments(config, batch, drop, list(enumerate(subs)))
    if config.input_feeding:
        return _feeding_segments(plan, config, batch, drop)
    return _no_feeding_segments(plan, config, batch, drop)


def run_strategy(plan: PlacementPlan, params: dict, batch: Batch, config: ModelConfig,
                 drop: Dropout | None = None, timeout: float = 60.0) -> StrategyResult:
    """One forward-backward pass of ``batch`` under ``plan``.

    Returns the token-mean loss, gradients for every parameter, and the
    execution trace.
    """
    if plan.strategy in (Strategy.HYBRID, Strategy.HYBRID_IF):
        want = strategy_variant(plan.strategy, config.variant)
        if config.variant is not want:
            raise SchedulingError(f"{plan.strategy.value} runs the {want.value} model,"
                                  f" config has {config.variant.value}")
    for ids in (batch.src, batch.tgt_in, batch.tgt_out):
        check_ids(ids, config.vocab_size)
    n_tokens = batch.tgt_tokens
    if n_tokens == 0:
        raise ValueError("batch has no non-PAD target tokens")
    owners = plan.owners(config)
    device_params = [{} for _ in range(plan.n_devices)]
    for name, devs in owners.items():
        for d in devs:
            # replicas are private copies; a sole owner may share the array
            device_params[d][name] = params[name].copy() if len(devs) > 1 else params[name]
    segs = build_segments(plan, config, batch, drop)
    scale = np.asarray(1.0 / n_tokens, dtype=config.dtype)
    total, grads, trace = execute(segs, device_params, plan.replicated(config), plan.root,
                                  scale, timeout)
    ordered = {name: grads[name] for name in params}
    return StrategyResult(total / n_tokens, ordered, trace)


def plan_for(strategy, config: ModelConfig, n_devices: int | None = None) -> PlacementPlan:
    strategy = Strategy(strategy)
    if n_devices is None:
        n_devices = 1 if strategy is Strategy.SERIAL else 4
    return build_placement(strategy, n_devices, config)
