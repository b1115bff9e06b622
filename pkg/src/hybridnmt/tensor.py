"""Dense numeric kernels shared by the model, the autograd tape and the executors.

Tensors are plain ``numpy.ndarray`` values (row-major, float32 or float64).
The functions here add the shape checking and the finiteness guard that the
rest of the package relies on; numerical work is delegated to numpy.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""


class MaskError(ValueError):
    """A softmax row has no unmasked entry."""


def dtype_for(precision: int) -> np.dtype:
    if precision == 32:
        return np.dtype(FLOAT32)
    if precision == 64:
        return np.dtype(FLOAT64)
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what} (shape {x.shape})")
    return x


class Rng:
    """Seeded generator (PCG64) with keyed sub-streams.

    ``Rng(seed).child(*key)`` always yields the same stream for the same
    ``(seed, key)``, independent of how many numbers were drawn elsewhere.
    This is what lets dropout masks agree across execution strategies.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *key: int) -> "Rng":
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in key]])
        out = Rng.__new__(Rng)
        out.seed = self.seed
        out._gen = np.random.Generator(np.random.PCG64(ss))
        return out

    def uniform(self, low, high, shape, dtype=FLOAT32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with a shape check naming both operands."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul")


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sentence product of ``(B, m, k)`` and ``(B, k, n)`` stacks."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(np.matmul(a, b), "batched_matmul")


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis, with optional boolean mask (True = keep).

    Masked entries come out exactly 0. Rows with nothing unmasked are
    rejected rather than turned into NaN.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=-1).all():
            raise MaskError("softmax_rows: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0).astype(x.dtype, copy=False)
    out = e / e.sum(axis=-1, keepdims=True)
    return check_finite(out, "softmax_rows")


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return check_finite(out, "log_softmax_rows")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"tanh": np.tanh, "sigmoid": sigmoid}
_BINARY = {"add": np.add, "mul": np.multiply, "sub": np.subtract}


def elementwise(op: str, *operands: np.ndarray) -> np.ndarray:
    """Apply ``tanh``/``sigmoid`` (one operand) or ``add``/``mul``/``sub`` (two)."""
    if op in _UNARY:
        if len(operands) != 1:
            raise TypeError(f"{op} takes one operand")
        return check_finite(_UNARY[op](operands[0]), op)
    if op in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{op} takes two operands")
        a, b = operands
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return check_finite(_BINARY[op](a, b), op)
    raise ValueError(f"unknown elementwise op {op!r}")


def concat(parts: Sequence[np.ndarray], axis: int) -> np.ndarray:
    """Concatenate in argument order; zero-size parts are dropped first."""
    parts = [np.asarray(p) for p in parts]
    nonempty = [p for p in parts if p.size > 0]
    if not nonempty:
        return parts[0].copy() if parts else np.zeros((0,))
    ref = nonempty[0]
    ax = axis % ref.ndim
    for p in nonempty[1:]:
        if p.ndim != ref.ndim or any(
            p.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}"
            )
    return np.concatenate(nonempty, axis=ax)
