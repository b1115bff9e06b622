"""Dependency structure of the unrolled encoder-decoder and its wave order.

A task ``(side, t, layer)`` is one LSTM cell application (``t`` and ``layer``
are 1-based here). Attention tasks are ``("att", t, 0)``: with input-feeding,
decoder step ``t + 1`` waits for attention of step ``t``; without it, the
attention tasks hang off the DAG and no decoder cell waits on them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple


class Task(NamedTuple):
    side: str   # "enc", "dec" or "att"
    t: int
    layer: int

    def label(self) -> str:
        return f"{self.side}:{self.t}:{self.layer}"


@dataclass
class WavefrontSchedule:
    tasks: list          # topological order, grouped by wave
    deps: dict           # task -> tuple of tasks it waits for
    input_feeding: bool

    @cached_property
    def wave(self) -> dict:
        """Wave index (1-based) = length of the longest dependency chain ending at the task."""
        w = {}
        for task in self.tasks:
            w[task] = 1 + max((w[d] for d in self.deps[task]), default=0)
        return w

    @property
    def n_waves(self) -> int:
        return max(self.wave.values(), default=0)

    def waves_of(self, side: str) -> int:
        """Number of distinct waves occupied by ``side``'s tasks."""
        return len({self.wave[t] for t in self.tasks if t.side == side})

    def groups(self) -> list[list[Task]]:
        out: dict[int, list] = {}
        for task in self.tasks:
            out.setdefault(self.wave[task], []).append(task)
        return [out[k] for k in sorted(out)]

    def critical_path(self) -> int:
        return self.n_waves


def wavefront_order(M: int, N: int, L: int, input_feeding: bool) -> WavefrontSchedule:
    """Tasks and dependencies for source length ``M``, target length ``N``, depth ``L``.

    ``N = 0`` yields the encoder alone.
    """
    if M < 1 or L < 1 or N < 0:
        raise ValueError("need M >= 1, L >= 1, N >= 0")
    deps: dict[Task, tuple] = {}
    for t in range(1, M + 1):
        for l in range(1, L + 1):
            d = []
            if t > 1:
                d.append(Task("enc", t - 1, l))
            if l > 1:
                d.append(Task("enc", t, l - 1))
            deps[Task("enc", t, l)] = tuple(d)
    for t in range(1, N + 1):
        for l in range(1, L + 1):
            d = [Task("dec", t - 1, l) if t > 1 else Task("enc", M, l)]
            if l > 1:
                d.append(Task("dec", t, l - 1))
            if input_feeding and l == 1 and t > 1:
                d.append(Task("att", t - 1, 0))
            deps[Task("dec", t, l)] = tuple(d)
        deps[Task("att", t, 0)] = (Task("dec", t, L), Task("enc", M, L))
    # insertion order above is already topological
    level: dict[Task, int] = {}
    for task, d in deps.items():
        level[task] = 1 + max((level[x] for x in d), default=0)
    order = sorted(deps, key=lambda k: (level[k], k.side != "enc", k.layer, k.t))
    return WavefrontSchedule(order, deps, input_feeding)
