"""Discrete-event cost simulation of the execution strategies.

The simulated job is one forward-backward pass over a mini-batch whose
sentences all have source length ``M`` and target length ``N``. Tasks are
the wavefront cells of :func:`~hybridnmt.parallel.wavefront.wavefront_order`
plus per-step attention and softmax work, mirrored for the backward pass.
When parameters are replicated, their gradients are summed at the root over
the interconnect, modelled as one extra resource that starts as soon as the
last task touching a replicated parameter has finished its backward pass.

Ticks are abstract; only ratios between strategies mean anything.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize

from .model import ModelConfig, lstm_names, param_shapes
from .parallel.placement import PlacementPlan, Strategy, build_placement
from .parallel.strategies import strategy_variant
from .parallel.wavefront import WavefrontSchedule, wavefront_order

# largest mini-batch (sentences) that fits in device memory per strategy
MEMORY_BATCH_CAPS = {
    Strategy.SERIAL: 64,
    Strategy.DATA_PARALLEL: 256,
    Strategy.MODEL_PARALLEL: 224,
    Strategy.HYBRID_IF: 224,
    Strategy.HYBRID: 224,
}

FREE_PARAMS = ("compute_cost", "transfer_cost", "sync_cost")

# measured GPU scaling factors on WMT14 En-De
WMT14_TARGETS = (
    (Strategy.DATA_PARALLEL, 1.60),
    (Strategy.MODEL_PARALLEL, 2.32),
    (Strategy.HYBRID_IF, 3.43),
    (Strategy.HYBRID, 4.13),
)


class SimulationError(RuntimeError):
    pass


class DegenerateFitError(SimulationError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Costs in ticks.

    A compute task touching ``P`` parameters for ``b`` sentences costs
    ``P * (compute_cost * b + fixed_cost)``; backward tasks cost
    ``backward_factor`` times their forward. ``fixed_cost`` is the
    batch-independent share of a task (what makes larger mini-batches cheaper
    per sentence). ``unit_tasks`` replaces all of that with 1 tick per task.
    """

    compute_cost: float = 1.0
    fixed_cost: float = 0.0
    transfer_cost: float = 0.0   # per byte moved between devices
    sync_cost: float = 0.0       # per replicated parameter, once per mini-batch, on the link
    backward_factor: float = 2.0
    softmax_factor: float = 1.0  # per-parameter cost of the output softmax relative to LSTM work
    bytes_per_value: int = 4
    unit_tasks: bool = False
    overlap_sync: bool = True    # sync may start before unrelated backward work finishes
    batch_caps: dict = field(default_factory=lambda: dict(MEMORY_BATCH_CAPS))

    def __post_init__(self):
        for name in ("compute_cost", "fixed_cost", "transfer_cost", "sync_cost",
                     "backward_factor", "softmax_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def task_cost(self, n_params: int, batch: float) -> float:
        if self.unit_tasks:
            return 1.0
        return n_params * (self.compute_cost * batch + self.fixed_cost)

    def cap(self, strategy: Strategy) -> int:
        return self.batch_caps.get(Strategy(strategy), 10**9)

    def to_json(self) -> dict:
        d = asdict(self)
        d["batch_caps"] = {Strategy(k).value: v for k, v in self.batch_caps.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CostModel":
        d = dict(d)
        if "batch_caps" in d:
            d["batch_caps"] = {Strategy.parse(k): int(v) for k, v in d["batch_caps"].items()}
        d.pop("residual", None)
        return cls(**d)


@dataclass
class SimTask:
    name: str
    device: int
    cost: float
    deps: list = field(default_factory=list)  # (task index, transfer bytes)
    start: float = 0.0
    end: float = 0.0


@dataclass
class SimReport:
    strategy: str
    batch_size: int
    makespan: float
    busy_fraction: list
    tokens_per_tick: float
    scaling_factor: float
    critical_path: float
    tasks: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "batch_size": self.batch_size,
                "makespan": round(self.makespan, 4),
                "busy_fraction": [round(b, 4) for b in self.busy_fraction],
                "tokens_per_tick": round(self.tokens_per_tick, 4),
                "tokens_per_mtick": round(self.tokens_per_tick * 1e6, 4),
                "scaling_factor": round(self.scaling_factor, 4),
                "critical_path": round(self.critical_path, 4)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# -------------------------------------------------------------- DAG building


def _sizes(config: ModelConfig) -> dict:
    return {n: int(np.prod(s)) for n, s in param_shapes(config).items()}


def _layer_params(sizes: dict, side: str, layer: int) -> int:
    return sum(sizes[n] for n in lstm_names(side, layer))


ATTENTION_PARAMS = ("attn.w_alpha", "attn.w_c")
SOFTMAX_PARAMS = ("out.w", "out.b")


def _shard_sizes(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if k < extra else 0) for k in range(n)]


def build_tasks(plan: PlacementPlan, schedule: WavefrontSchedule, cost: CostModel,
                config: ModelConfig, batch_size: int, backward: bool = True) -> list[SimTask]:
    """Expand a schedule into device-bound simulation tasks (topologically ordered)."""
    tasks: list[SimTask] = []
    replicas = plan.n_devices if plan.strategy is Strategy.DATA_PARALLEL else 1
    H, bpv = config.hidden_size, cost.bytes_per_value
    M = schedule_length(schedule, "enc")
    sizes = _sizes(config)
    attn_p = sum(sizes[n] for n in ATTENTION_PARAMS)
    soft_p = sum(sizes[n] for n in SOFTMAX_PARAMS)
    forward_sets = []

    for r, b in enumerate(_shard_sizes(batch_size, replicas)):
        index: dict = {}      # schedule task -> [(sim index, sentences)]
        fwd: list = []
        consumers: dict = {}

        def add(name, device, c, deps):
            tasks.append(SimTask(name, device, c, deps))
            i = len(tasks) - 1
            fwd.append(i)
            for d, nbytes in deps:
                consumers.setdefault(d, []).append((i, nbytes))
            return i

        for task in schedule.tasks:
            if task.side in ("enc", "dec"):
                dev = r if replicas > 1 else plan.layer_to_device.get(task.layer, 0)
                deps = []
                for d in schedule.deps[task]:
                    for i, bk in index[d]:
                        deps.append((i, bk * H * bpv))
                c = cost.task_cost(_layer_params(sizes, task.side, task.layer), b)
                index[task] = [(add(f"r{r}:{task.label()}", dev, c, deps), b)]
                continue
            # attention, then output softmax, of one decoder step, split by sentence;
            # only the attention output feeds the next step under input-feeding
            if replicas > 1 or plan.strategy is Strategy.SERIAL:
                devices = [r]
            else:
                devices = list(plan.attn_devices)
            index[task] = []
            for dev, bk in zip(devices, _shard_sizes(b, len(devices))):
                if bk == 0:
                    continue
                deps = []
                for d in schedule.deps[task]:
                    (i, _), = index[d]
                    if d.side == "dec":
                        deps.append((i, bk * H * bpv))
                    else:  # encoder states are shipped with the first step only
                        deps.append((i, bk * H * bpv * M if task.t == 1 else 0))
                k = add(f"r{r}:att:{task.t}:{dev}", dev, cost.task_cost(attn_p, bk), deps)
                index[task].append((k, bk))
                add(f"r{r}:softmax:{task.t}:{dev}", dev,
                    cost.task_cost(soft_p, bk) * (1.0 if cost.unit_tasks else cost.softmax_factor),
                    [(k, 0)])
        forward_sets.append((fwd, consumers))

    if backward:
        for fwd, consumers in forward_sets:
            bwd_of = {}
            for i in reversed(fwd):
                f = tasks[i]
                deps = [(i, 0)] + [(bwd_of[c], nb) for c, nb in consumers.get(i, ())]
                tasks.append(SimTask("bwd:" + f.name, f.device, f.cost * cost.backward_factor,
                                     deps))
                bwd_of[i] = len(tasks) - 1
        replicated = plan.replicated(config)
        if replicated and plan.n_devices > 1:
            # the reduction runs on the interconnect (resource ``n_devices``),
            # as soon as every task touching a replicated parameter is done
            n_rep = sum(sizes[n] for n in replicated)
            if plan.strategy is Strategy.DATA_PARALLEL or not cost.overlap_sync:
                ends = [i for i, t in enumerate(tasks) if t.name.startswith("bwd:")]
            else:
                ends = [i for i, t in enumerate(tasks)
                        if t.name.startswith(("bwd:r0:att", "bwd:r0:softmax"))]
            tasks.append(SimTask("sync", plan.n_devices, cost.sync_cost * n_rep,
                                 [(i, 0) for i in ends]))
    return tasks


def schedule_length(schedule: WavefrontSchedule, side: str) -> int:
    return max((t.t for t in schedule.tasks if t.side == side), default=0)


# ------------------------------------------------------------------ simulation


def run_tasks(tasks: list[SimTask], n_devices: int, transfer_cost: float) -> float:
    """Event-driven list scheduling; returns the makespan.

    A task becomes ready when every dependency has finished and its data has
    arrived (``bytes * transfer_cost`` after the producer ends, zero on the
    same device). An idle device starts its ready task with the lowest index.
    """
    n = len(tasks)
    succ: list[list] = [[] for _ in range(n)]
    remaining = [len(t.deps) for t in tasks]
    ready_at = [0.0] * n
    for i, t in enumerate(tasks):
        for d, _ in t.deps:
            if d >= i:
                raise SimulationError(f"task {t.name} depends on a later task (cycle?)")
            succ[d].append(i)
    dep_bytes = [{d: nb for d, nb in t.deps} for t in tasks]
    ready: list[list] = [[] for _ in range(n_devices)]
    idle = [True] * n_devices
    events: list = []  # (time, kind, payload)
    for i in range(n):
        if remaining[i] == 0:
            heapq.heappush(events, (0.0, 1, i))
    done = 0
    now = 0.0
    while events:
        now, kind, i = heapq.heappop(events)
        if kind == 0:  # task finished
            dev = tasks[i].device
            idle[dev] = True
            done += 1
            for s in succ[i]:
                delay = 0.0 if tasks[s].device == dev else dep_bytes[s][i] * transfer_cost
                ready_at[s] = max(ready_at[s], now + delay)
                remaining[s] -= 1
                if remaining[s] == 0:
                    heapq.heappush(events, (ready_at[s], 1, s))
        else:  # task ready
            heapq.heappush(ready[tasks[i].device], i)
        # start work on idle devices; finish events at equal time are handled first
        if events and events[0][0] == now:
            continue
        for dev in range(n_devices):
            if idle[dev] and ready[dev]:
                j = heapq.heappop(ready[dev])
                tasks[j].start = now
                tasks[j].end = now + tasks[j].cost
                idle[dev] = False
                heapq.heappush(events, (tasks[j].end, 0, j))
    if done != n:
        raise SimulationError(f"only {done} of {n} tasks ran; dependency cycle")
    return max((t.end for t in tasks), default=0.0)


def critical_path(tasks: list[SimTask], transfer_cost: float) -> float:
    """Longest dependency chain including transfer delays (unbounded devices)."""
    finish = [0.0] * len(tasks)
    for i, t in enumerate(tasks):
        start = 0.0
        for d, nb in t.deps:
            delay = 0.0 if tasks[d].device == t.device else nb * transfer_cost
            start = max(start, finish[d] + delay)
        finish[i] = start + t.cost
    return max(finish, default=0.0)


def simulate(plan: PlacementPlan, schedule: WavefrontSchedule, cost: CostModel,
             batch_size: int, config: ModelConfig, backward: bool = True,
             baseline: tuple | None = None, check_cap: bool = True) -> SimReport:
    """Simulated makespan, utilisation and scaling factor of one mini-batch.

    ``baseline`` is ``(serial makespan, serial batch size)``; by default the
    one-device serial run at its memory cap with the same schedule lengths.
    """
    if check_cap and batch_size > cost.cap(plan.strategy):
        raise SimulationError(f"batch {batch_size} exceeds the {plan.strategy.value}"
                              f" cap of {cost.cap(plan.strategy)}")
    tasks = build_tasks(plan, schedule, cost, config, batch_size, backward)
    makespan = run_tasks(tasks, plan.n_devices + 1, cost.transfer_cost)
    busy = [0.0] * plan.n_devices
    for t in tasks:
        if t.device < plan.n_devices:
            busy[t.device] += t.cost
    M = schedule_length(schedule, "enc")
    tpt = batch_size * M / makespan if makespan > 0 else float("inf")
    if baseline is None:
        sb = cost.cap(Strategy.SERIAL)
        serial_plan = build_placement(Strategy.SERIAL, 1, config)
        base_tasks = build_tasks(serial_plan, schedule_for_baseline(schedule, config),
                                 cost, config, sb, backward)
        baseline = (run_tasks(base_tasks, 1, cost.transfer_cost), sb)
    if baseline[0] <= 0:
        raise SimulationError("serial baseline has zero makespan; the cost model is all zeros")
    factor = tpt / (baseline[1] * M / baseline[0])
    return SimReport(plan.strategy.value, batch_size, makespan,
                     [x / makespan if makespan else 0.0 for x in busy], tpt, factor,
                     critical_path(tasks, cost.transfer_cost), tasks)


def schedule_for_baseline(schedule: WavefrontSchedule, config: ModelConfig) -> WavefrontSchedule:
    """The one-device baseline always runs the configured (input-feeding) model."""
    M = schedule_length(schedule, "enc")
    N = schedule_length(schedule, "dec")
    L = max(t.layer for t in schedule.tasks)
    return wavefront_order(M, N, L, config.input_feeding)


def serial_baseline(cost: CostModel, config: ModelConfig, src_len: int, tgt_len: int) -> tuple:
    """``(makespan, batch size)`` of the one-device run of the configured model at its cap."""
    sb = cost.cap(Strategy.SERIAL)
    plan = build_placement(Strategy.SERIAL, 1, config)
    sched = wavefront_order(src_len, tgt_len, config.depth, config.input_feeding)
    return run_tasks(build_tasks(plan, sched, cost, config, sb), 1, cost.transfer_cost), sb


def simulate_strategy(strategy, cost: CostModel, config: ModelConfig, src_len: int,
                      tgt_len: int, batch_size: int | None = None,
                      n_devices: int | None = None, baseline: tuple | None = None) -> SimReport:
    """Default placement, cap-sized batch, and the strategy's own model variant."""
    strategy = Strategy(strategy)
    if n_devices is None:
        n_devices = 1 if strategy is Strategy.SERIAL else 4
    run_cfg = config.replace(variant=strategy_variant(strategy, config.variant))
    plan = build_placement(strategy, n_devices, run_cfg)
    sched = wavefront_order(src_len, tgt_len, config.depth, run_cfg.input_feeding)
    b = cost.cap(strategy) if batch_size is None else batch_size
    if baseline is None:
        baseline = serial_baseline(cost, config, src_len, tgt_len)
    return simulate(plan, sched, cost, b, run_cfg, baseline=baseline)


def pipeline_report(n_steps: int = 100, depth: int = 4):
    """Encoder-only wavefront, one layer per device, unit tasks, no transfer cost."""
    mc = ModelConfig(vocab_size=8, emb_size=2, hidden_size=2, depth=depth)
    plan = PlacementPlan(Strategy.MODEL_PARALLEL, depth,
                         {l: l - 1 for l in range(1, depth + 1)}, (depth - 1,), 0, depth - 1)
    sched = wavefront_order(n_steps, 0, depth, False)
    cost = CostModel(unit_tasks=True)
    rep = simulate(plan, sched, cost, 1, mc, backward=False, baseline=(n_steps * depth, 1),
                   check_cap=False)
    return rep, plan.n_devices



# ----------------------------------------------------------------- calibration


@dataclass
class Calibration:
    cost: CostModel
    residual: float            # root of summed squared error over targets
    fitted: dict               # strategy -> simulated scaling factor
    targets: dict


def _predict(cost: CostModel, config, strategies, src_len, tgt_len) -> np.ndarray:
    base = serial_baseline(cost, config, src_len, tgt_len)
    return np.array([simulate_strategy(s, cost, config, src_len, tgt_len, baseline=base
                                       ).scaling_factor for s in strategies])


def calibrate(base: CostModel, targets: list, config: ModelConfig, src_len: int = 25,
              tgt_len: int = 25, free=("compute_cost", "transfer_cost", "sync_cost")
              ) -> Calibration:
    """Least-squares fit of the free cost scalars to target scaling factors.

    Parameters are fitted in log space (they must stay positive). The fit is
    rejected as degenerate if the Jacobian at the solution has lower rank than
    the number of free parameters.
    """
    free = tuple(free)
    for name in free:
        if name not in FREE_PARAMS:
            raise ValueError(f"unknown cost parameter {name!r}; choose from {FREE_PARAMS}")
    if len(targets) < len(free):
        raise ValueError(f"{len(targets)} targets cannot determine {len(free)} parameters")
    strategies = [Strategy.parse(s) if isinstance(s, str) else Strategy(s) for s, _ in targets]
    want = np.array([float(v) for _, v in targets])

    def model_at(z):
        return replace(base, **{n: float(np.exp(v)) for n, v in zip(free, z)})

    def resid(z):
        return _predict(model_at(z), config, strategies, src_len, tgt_len) - want

    z0 = np.array([np.log(max(getattr(base, n), 1e-12)) for n in free])
    best = None
    # a few restarts: the makespan is only piecewise smooth in the costs
    for shift in (0.0, 2.0, -2.0, 4.0, -4.0):
        sol = optimize.least_squares(resid, z0 + shift, method="trf", diff_step=1e-6,
                                     xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=400)
        if best is None or sol.cost < best.cost:
            best = sol
        if best.cost < 1e-20:
            break
    J = best.jac
    if J.size == 0 or np.linalg.matrix_rank(J, tol=1e-9 * max(1.0, np.abs(J).max())) < len(free):
        raise DegenerateFitError(f"fit of {free} is singular at the solution")
    fitted = model_at(best.x)
    pred = best.fun + want
    return Calibration(fitted, float(np.sqrt(np.sum(best.fun ** 2))),
                       {s.value: float(p) for s, p in zip(strategies, pred)},
                       {s.value: float(v) for s, v in zip(strategies, want)})


# fixed_cost = 1 sets the tick unit; the other three are starting values for the fit
CALIBRATION_START = CostModel(compute_cost=0.004, fixed_cost=1.0, transfer_cost=10.0,
                              sync_cost=60.0)


def calibrate_wmt14(config: ModelConfig | None = None, targets=WMT14_TARGETS,
                    start: CostModel = CALIBRATION_START) -> Calibration:
    """Fit compute, transfer and sync costs to the WMT14 targets at full model size."""
    return calibrate(start, list(targets), config or ModelConfig())


def scaling_factor(tokens_per_sec: float, baseline_tokens_per_sec: float) -> float:
    if baseline_tokens_per_sec <= 0:
        raise ZeroDivisionError("baseline throughput must be positive")
    return tokens_per_sec / baseline_tokens_per_sec
