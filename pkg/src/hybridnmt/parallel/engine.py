"""Virtual devices, logged message channels and the segment executor.

Work is expressed as :class:`Segment` objects: a small forward computation
bound to one device, consuming named values and producing named values.
Each segment runs on its own autograd tape. The executor

1. orders all segments by longest-path level (a global topological order)
   and gives every device its segments in that order, which rules out
   deadlock;
2. runs the forward pass, shipping each produced value to every remote
   device that consumes it;
3. runs the backward pass in reverse order: a segment sums the gradient
   contributions of its consumers in a fixed order, back-propagates through
   its tape, and ships the gradients of its inputs to their producers;
4. sums replicated parameter gradients at the root in device order and
   broadcasts the result.

Timestamps are logical (Lamport) ticks so traces are reproducible; every
event lasts one tick and a receive never ends before its send.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autograd as ag


class SchedulingError(RuntimeError):
    pass


class ParamAccessError(SchedulingError):
    pass


@dataclass
class Segment:
    label: str
    device: int
    inputs: list
    outputs: list
    fn: Callable  # (tape, {key: Node}, params) -> {key: Node}
    losses: tuple = ()  # output keys seeded with the loss gradient


@dataclass(frozen=True)
class Event:
    device: int
    kind: str  # compute | send | recv | sync
    task: str
    start: int
    end: int
    bytes: int = 0


@dataclass
class ExecTrace:
    events: list = field(default_factory=list)
    touches: set = field(default_factory=set)  # (device, parameter name)
    wall_seconds: float = 0.0

    def to_csv(self, path_or_file) -> None:
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        f = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(f)
            w.writerow(["device", "kind", "task", "start", "end", "bytes"])
            for e in sorted(self.events, key=lambda e: (e.start, e.device, e.kind, e.task)):
                w.writerow([e.device, e.kind, e.task, e.start, e.end, e.bytes])
        finally:
            if own:
                f.close()

    def compute_events(self) -> dict[str, Event]:
        """Forward compute event per segment label (first occurrence)."""
        out = {}
        for e in self.events:
            if e.kind == "compute" and not e.task.startswith("bwd:") and e.task not in out:
                out[e.task] = e
        return out

    def devices_for(self, prefix: str) -> set[int]:
        return {e.device for e in self.events
                if e.kind == "compute" and e.task.startswith(prefix)}


class _GuardedParams(dict):
    """Parameter view of one device; reading a foreign parameter is an error."""

    def __init__(self, device, owned, touches):
        super().__init__(owned)
        self.device, self.touches = device, touches

    def __getitem__(self, name):
        if name not in self.keys():
            raise ParamAccessError(f"device {self.device} read parameter {name!r} it does not hold")
        self.touches.add((self.device, name))
        return dict.__getitem__(self, name)


class VirtualDevice:
    """A worker thread with private parameters, an inbox and an event log."""

    def __init__(self, device_id: int, params: dict, fabric: "Fabric"):
        self.id = device_id
        self.fabric = fabric
        self.clock = 0
        self.events: list[Event] = []
        self.touches: set = set()
        self.params = _GuardedParams(device_id, params, self.touches)
        self.inbox: queue.Queue = queue.Queue()
        self._pending: dict = {}
        self.store: dict = {}      # forward values by key
        self.grad_parts: dict = {}  # (key, consumer label) -> gradient
        self.param_grads: dict = {}
        self.tapes: dict = {}
        self.loss_total = 0.0

    def log(self, kind, task, nbytes=0, start=None):
        start = self.clock if start is None else max(self.clock, start)
        self.events.append(Event(self.id, kind, task, start, start + 1, nbytes))
        self.clock = start + 1
        return self.clock

    def send(self, dst: int, key, payload, task: str):
        nbytes = int(payload.nbytes) if isinstance(payload, np.ndarray) else 0
        end = self.log("send", task, nbytes)
        self.fabric.devices[dst].inbox.put((key, payload, end, nbytes))

    def recv(self, key, task: str):
        if key not in self._pending:
            deadline = time.monotonic() + self.fabric.timeout
            while key not in self._pending:
                if self.fabric.abort.is_set():
                    raise SchedulingError(f"device {self.id}: aborted while waiting for {key}")
                try:
                    k, payload, sent_at, nbytes = self.inbox.get(timeout=0.05)
                except queue.Empty:
                    if time.monotonic() > deadline:
                        raise SchedulingError(
                            f"device {self.id}: task {task} timed out waiting for {key}")
                    continue
                self._pending[k] = (payload, sent_at, nbytes)
        payload, sent_at, nbytes = self._pending.pop(key)
        self.log("recv", task, nbytes, start=sent_at)
        return payload


class Fabric:
    def __init__(self, n_devices: int, device_params: list[dict], timeout: float):
        self.timeout = timeout
        self.abort = threading.Event()
        self.devices = [VirtualDevice(d, device_params[d], self) for d in range(n_devices)]


def _levels(segments: list[Segment]) -> dict[str, int]:
    producer = {k: s for s in segments for k in s.outputs}
    level: dict[str, int] = {}
    for s in segments:  # construction order must already be topological
        lv = 0
        for k in s.inputs:
            if k not in producer:
                raise SchedulingError(f"segment {s.label}: no producer for {k}")
            p = producer[k].label
            if p not in level:
                raise SchedulingError(f"segment {s.label} is listed before its producer {p}")
            lv = max(lv, level[p] + 1)
        level[s.label] = lv
    return level


def execute(segments: list[Segment], device_params: list[dict], replicated: list[str],
            root: int, loss_scale: float, timeout: float = 60.0):
    """Run forward and backward over all segments.

    Returns ``(summed loss outputs in segment order, {param: grad}, ExecTrace)``.
    """
    n_devices = len(device_params)
    level = _levels(segments)
    order = sorted(range(len(segments)), key=lambda i: (level[segments[i].label], i))
    ordered = [segments[i] for i in order]
    producer = {k: s for s in ordered for k in s.outputs}
    consumers: dict = {}
    for s in ordered:
        for k in s.inputs:
            consumers.setdefault(k, []).append(s)
    fabric = Fabric(n_devices, device_params, timeout)
    per_device = [[s for s in ordered if s.device == d] for d in range(n_devices)]
    loss_segments = [s for s in ordered if s.losses]
    errors: list = []

    def forward(dev: VirtualDevice):
        for s in per_device[dev.id]:
            tape = ag.Tape()
            leaves = {}
            for k in s.inputs:
                if producer[k].device == dev.id or k in dev.store:
                    val = dev.store[k]
                else:
                    val = dev.recv(("v", k), s.label)
                    dev.store[k] = val
                leaves[k] = tape.leaf(val)
            outs = s.fn(tape, leaves, dev.params)
            dev.log("compute", s.label)
            dev.tapes[s.label] = (tape, leaves, outs)
            for k in s.outputs:
                dev.store[k] = outs[k].value
                for d in sorted({c.device for c in consumers.get(k, ())} - {dev.id}):
                    dev.send(d, ("v", k), outs[k].value, s.label)

    def backward(dev: VirtualDevice):
        for s in reversed(per_device[dev.id]):
            tape, leaves, outs = dev.tapes.pop(s.label)
            seeds = {}
            for k in s.outputs:
                g = None
                for c in consumers.get(k, ()):
                    if c.device == dev.id:
                        part = dev.grad_parts.pop((k, c.label))
                    else:
                        part = dev.recv(("g", k, c.label), "bwd:" + s.label)
                    if part is not None:
                        g = part if g is None else g + part
                if k in s.losses:
                    seed = np.full(outs[k].shape, loss_scale, dtype=outs[k].value.dtype)
                    g = seed if g is None else g + seed
                if g is not None:
                    seeds[outs[k]] = g
            if seeds:
                grads = tape.backward(seeds)
            else:
                grads = {}
            dev.log("compute", "bwd:" + s.label)
            for name, g in grads.items():
                acc = dev.param_grads.get(name)
                dev.param_grads[name] = g if acc is None else acc + g
            for k in s.inputs:
                g = leaves[k].grad if seeds else None
                p = producer[k]
                if p.device == dev.id:
                    dev.grad_parts[(k, s.label)] = g
                else:
                    dev.send(p.device, ("g", k, s.label), g, "bwd:" + s.label)

    def reduce(dev: VirtualDevice):
        # loss values to root
        mine = [s for s in loss_segments if s.device == dev.id]
        for s in mine:
            for k in s.losses:
                if dev.id != root:
                    dev.send(root, ("loss", k), dev.store[k], "loss")
        if dev.id == root:
            total = 0.0
            for s in loss_segments:
                for k in s.losses:
                    v = dev.store[k] if s.device == root else dev.recv(("loss", k), "loss")
                    total += float(v)
            dev.loss_total = total
        # replicated gradients: root sums in device order, then broadcasts
        holders = [d for d in range(n_devices)
                   if any(n in device_params[d] for n in replicated)]
        if not replicated or dev.id not in holders:
            return
        local = {n: dev.param_grads.get(n, np.zeros_like(device_params[dev.id][n]))
                 for n in replicated if n in device_params[dev.id]}
        if dev.id != root:
            for n in replicated:
                if n in local:
                    dev.send(root, ("r", n, dev.id), local[n], "allreduce")
            for n in replicated:
                if n in local:
                    dev.param_grads[n] = dev.recv(("b", n), "broadcast")
            return
        for n in replicated:
            parts = []
            for d in holders:
                if n not in device_params[d]:
                    continue
                parts.append(local[n] if d == root else dev.recv(("r", n, d), "allreduce"))
            summed = allreduce(parts)
            dev.log("sync", "allreduce:" + n, int(summed.nbytes))
            dev.param_grads[n] = summed
            for d in holders:
                if d != root and n in device_params[d]:
                    dev.send(d, ("b", n), summed, "broadcast")

    def worker(dev):
        try:
            forward(dev)
            backward(dev)
            reduce(dev)
        except BaseException as exc:  # surfaced by the coordinator
            errors.append((dev.id, exc))
            fabric.abort.set()

    t0 = time.perf_counter()
    if n_devices == 1:
        worker(fabric.devices[0])
    else:
        threads = [threading.Thread(target=worker, args=(d,), name=f"vdev{d.id}", daemon=True)
                   for d in fabric.devices]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    wall = time.perf_counter() - t0
    if errors:
        errors.sort(key=lambda e: isinstance(e[1], SchedulingError) and "aborted" in str(e[1]))
        dev_id, exc = errors[0]
        raise exc
    trace = ExecTrace(wall_seconds=wall)
    for dev in fabric.devices:
        trace.events.extend(dev.events)
        trace.touches |= dev.touches
    grads = {}
    for d, dev in enumerate(fabric.devices):
        for name in device_params[d]:
            if name in replicated and d != root:
                continue
            grads[name] = dev.param_grads.get(name, np.zeros_like(device_params[d][name]))
    return fabric.devices[root].loss_total, grads, trace


def allreduce(parts: list[np.ndarray]) -> np.ndarray:
    """Sum in list order; the fixed order keeps the result bit-reproducible."""
    out = np.array(parts[0], copy=True)
    for p in parts[1:]:
        out += p
    return out
