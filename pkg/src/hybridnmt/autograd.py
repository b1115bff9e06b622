"""Define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation applied to :class:`Node` values in
creation order, which is a valid topological order. ``Tape.backward`` sweeps
the record in reverse and accumulates (``+=``) into each parent, so a
parameter reused across timesteps receives the sum of all its uses.

Executors build one tape per task segment: cross-device inputs enter a tape
as plain leaves, and the gradient that lands on such a leaf is what gets
shipped back to the producing device.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T

GradientSet = dict  # parameter name -> ndarray, same shape as the parameter


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("tape", "value", "parents", "backward_fn", "index", "param_name", "grad")

    def __init__(self, tape, value, parents=(), backward_fn=None, param_name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" param={self.param_name}" if self.param_name else ""
        return f"<Node #{self.index} shape={self.value.shape}{tag}>"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def leaf(self, value) -> Node:
        return Node(self, np.asarray(value))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Register a learnable leaf; repeated calls with one name share the node."""
        node = self.params.get(name)
        if node is None:
            node = Node(self, value, param_name=name)
            self.params[name] = node
        return node

    def backward(self, seeds: Mapping[Node, np.ndarray] | Node) -> GradientSet:
        """Reverse sweep from ``seeds`` (node -> upstream gradient).

        Passing a single scalar node seeds it with 1. Returns gradients for
        every parameter registered on this tape; gradients of the other
        leaves stay readable as ``node.grad``.
        """
        if isinstance(seeds, Node):
            if seeds.value.size != 1:
                raise GraphError(f"loss node must be scalar, got shape {seeds.value.shape}")
            seeds = {seeds: np.ones_like(seeds.value)}
        for n in self.nodes:
            n.grad = None
        for node, g in seeds.items():
            if node.tape is not self:
                raise GraphError("seed node belongs to another tape")
            g = np.asarray(g, dtype=node.value.dtype)
            if g.shape != node.value.shape:
                raise GraphError(f"seed gradient {g.shape} vs node {node.value.shape}")
            node.grad = g.copy() if node.grad is None else node.grad + g
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        out = {}
        for name, node in self.params.items():
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def _record(parents: Sequence[Node], value: np.ndarray, backward_fn) -> Node:
    return Node(parents[0].tape, value, tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a: Node, b: Node) -> Node:
    return _record((a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    return _record((a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return _record((a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Node, c) -> Node:
    """Multiply by a constant (scalar or array without gradient)."""
    return _record((a,), a.value * c, lambda g: (g * c,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return _record((a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Node) -> Node:
    y = T.sigmoid(a.value)
    return _record((a,), y, lambda g: (g * y * (1.0 - y),))


def total(a: Node) -> Node:
    """Sum of all entries, as a 0-d node."""
    shape = a.shape
    return _record((a,), np.asarray(a.value.sum()),
                   lambda g: (np.full(shape, g, dtype=a.value.dtype),))


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return _record((a, b), T.matmul(av, bv), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w (+ b)`` where ``x`` may carry leading batch axes."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise T.DimensionError(f"linear: cannot multiply {xv.shape} by {wv.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])
    y = x2 @ wv
    if b is not None:
        y = y + b.value
    y = y.reshape(xv.shape[:-1] + (wv.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _record(parents, y, back)


def bmm(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    y = T.batched_matmul(av, bv)
    return _record((a, b), y, lambda g: (np.matmul(g, bv.transpose(0, 2, 1)),
                                         np.matmul(av.transpose(0, 2, 1), g)))


def swap_last(a: Node) -> Node:
    """Transpose the last two axes."""
    return _record((a,), np.swapaxes(a.value, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    vals = [p.value for p in parts]
    y = T.concat(vals, axis)
    ax = axis % y.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def back(g):
        out = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _record(tuple(parts), y, back)


def stack(parts: Sequence[Node], axis: int = 0) -> Node:
    y = np.stack([p.value for p in parts], axis=axis)
    return _record(tuple(parts), y,
                   lambda g: [np.take(g, i, axis=axis) for i in range(len(parts))])


def take(a: Node, index: int, axis: int) -> Node:
    """Select one position along ``axis`` (the axis is dropped)."""
    shape, dt = a.shape, a.value.dtype

    def back(g):
        out = np.zeros(shape, dtype=dt)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        out[tuple(idx)] = g
        return (out,)

    return _record((a,), np.take(a.value, index, axis=axis), back)


def columns(a: Node, start: int, stop: int) -> Node:
    """Slice ``[..., start:stop]`` of the last axis."""
    shape, dt = a.shape, a.value.dtype

    def back(g):
        out = np.zeros(shape, dtype=dt)
        out[..., start:stop] = g
        return (out,)

    return _record((a,), a.value[..., start:stop], back)


def rows(a: Node, index: np.ndarray) -> Node:
    """Gather ``a[index]`` along axis 0."""
    index = np.asarray(index)
    shape, dt = a.shape, a.value.dtype

    def back(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, index, g)
        return (out,)

    return _record((a,), a.value[index], back)


def embedding(table: Node, ids: np.ndarray) -> Node:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return rows(table, ids)


def where_rows(keep: np.ndarray, a: Node, b: Node) -> Node:
    """Per-row select: ``keep`` is a constant 0/1 column vector."""
    k = keep.astype(a.value.dtype)
    return _record((a, b), k * a.value + (1 - k) * b.value,
                   lambda g: (g * k, g * (1 - k)))


def softmax(a: Node, mask: np.ndarray | None = None) -> Node:
    y = T.softmax_rows(a.value, mask)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record((a,), y, back)


def log(a: Node) -> Node:
    av = a.value
    return _record((a,), T.check_finite(np.log(av), "log"), lambda g: (g / av,))


def softmax_nll_sum(logits: Node, targets: np.ndarray, weight: np.ndarray) -> Node:
    """Summed negative log-likelihood ``-sum_i weight_i * log softmax(logits_i)[t_i]``.

    Fused with log-sum-exp so no probability is ever rounded to 0 before the log.
    """
    lv = logits.value
    flat = lv.reshape(-1, lv.shape[-1])
    t = np.asarray(targets).reshape(-1)
    w = np.asarray(weight, dtype=lv.dtype).reshape(-1)
    logp = T.log_softmax_rows(flat)
    picked = logp[np.arange(len(t)), t]
    loss = np.asarray(-(w * picked).sum(), dtype=lv.dtype)

    def back(g):
        p = np.exp(logp)
        p[np.arange(len(t)), t] -= 1.0
        return ((p * (w[:, None] * g)).reshape(lv.shape),)

    return _record((logits,), loss, back)


def lstm_cell(x: Node, h: Node, c: Node, wx: Node, wh: Node, b: Node) -> Node:
    """Fused LSTM step; returns ``[h_new | c_new]`` concatenated on the last axis.

    Gate order in the packed weights is i, f, g, o.
    """
    xv, hv, cv = x.value, h.value, c.value
    n = hv.shape[-1]
    if wx.shape[0] != xv.shape[-1] or wh.shape != (n, 4 * n) or wx.shape[1] != 4 * n:
        raise T.DimensionError(
            f"lstm_cell: x {xv.shape}, h {hv.shape} incompatible with "
            f"W_x {wx.shape}, W_h {wh.shape}"
        )
    z = xv @ wx.value + hv @ wh.value + b.value
    i = T.sigmoid(z[:, :n])
    f = T.sigmoid(z[:, n:2 * n])
    gg = np.tanh(z[:, 2 * n:3 * n])
    o = T.sigmoid(z[:, 3 * n:])
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    out = T.check_finite(np.concatenate([h_new, c_new], axis=-1), "lstm_cell")

    def back(g):
        gh, gc = g[:, :n], g[:, n:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * cv * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return (dz @ wx.value.T, dz @ wh.value.T, dc * f,
                xv.T @ dz, hv.T @ dz, dz.sum(axis=0))

    return _record((x, h, c, wx, wh, b), out, back)


# ------------------------------------------------------------- graph wrapper


class TapeGraph:
    """A replayable computation: ``build(tape, leaves) -> {name: node}``.

    ``params`` are registered on the tape before ``build`` runs; ``leaf_names``
    must all be bound by :func:`forward`.
    """

    def __init__(self, build: Callable[[Tape, dict], Mapping[str, Node] | Node],
                 params: Mapping[str, np.ndarray], leaf_names: Iterable[str] = ()):
        self.build = build
        self.params = dict(params)
        self.leaf_names = list(leaf_names)
        self.tape: Tape | None = None
        self.outputs: dict[str, Node] = {}
        self._inputs: dict = {}

    def run(self, inputs: Mapping | None = None) -> dict[str, Node]:
        inputs = dict(inputs or self._inputs)
        missing = [n for n in self.leaf_names if n not in inputs]
        if missing:
            raise GraphError(f"unbound leaves: {missing}")
        self._inputs = inputs
        tape = Tape()
        leaves = {name: tape.param(name, v) for name, v in self.params.items()}
        for name in self.leaf_names:
            leaves[name] = tape.leaf(inputs[name])
        out = self.build(tape, leaves)
        if isinstance(out, Node):
            out = {"loss": out}
        self.tape, self.outputs = tape, dict(out)
        return self.outputs


def forward(graph: TapeGraph, inputs: Mapping | None = None) -> dict[str, np.ndarray]:
    return {k: n.value for k, n in graph.run(inputs).items()}


def backward(graph: TapeGraph, loss: str = "loss") -> GradientSet:
    if graph.tape is None:
        raise GraphError("forward has not been run")
    grads = graph.tape.backward(graph.outputs[loss])
    return {name: grads.get(name, np.zeros_like(v)) for name, v in graph.params.items()}


def grad_check(graph: TapeGraph, loss: str = "loss", eps: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    The error of one parameter tensor is ``max|a - n| / max(max|a|, max|n|)``
    with ``a`` analytic and ``n`` the central difference
    ``(f(w + eps) - f(w - eps)) / (2 eps)``; the result is the worst tensor.
    Normalising per tensor keeps near-zero entries from drowning the figure
    in finite-difference roundoff. Requires float64 parameters and only
    reports, never asserts.
    """
    if not graph.params:
        return 0.0
    for name, v in graph.params.items():
        if v.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters ({name} is {v.dtype})")
    graph.run()
    analytic = backward(graph, loss)
    worst = 0.0
    for name, w in graph.params.items():
        flat = w.reshape(-1)
        numeric = np.empty_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(graph.run()[loss].value)
            flat[k] = orig - eps
            down = float(graph.run()[loss].value)
            flat[k] = orig
            numeric[k] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic[name].reshape(-1), numeric))
    graph.run()
    return worst


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b|`` scaled by the larger of the two max-magnitudes (0 if both are 0)."""
    scale_ = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    if scale_ == 0.0:
        return 0.0
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max()) / scale_
