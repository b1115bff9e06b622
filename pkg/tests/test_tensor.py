import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridnmt import tensor as T


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def test_matmul_identity_and_zero():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), x), x)
    np.testing.assert_array_equal(T.matmul(x, np.zeros((2, 1))), np.zeros((2, 1)))


def test_matmul_random_against_loop():
    rng = T.Rng(3)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (4, 2))
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-7)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_matches_loop_oracle(m, k, n, seed):
    rng = T.Rng(seed)
    a = rng.uniform(-2, 2, (m, k))
    b = rng.uniform(-2, 2, (k, n))
    ref = naive_matmul(a, b)
    got = T.matmul(a, b).astype(np.float64)
    scale = max(1.0, float(np.abs(ref).max()))
    assert float(np.abs(got - ref).max()) / scale < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(np.array([[math.log(2), 0.0]])),
                               [[2 / 3, 1 / 3]], rtol=1e-12)
    out = T.softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-6)


def test_softmax_mask_zeroes_and_full_mask_raises():
    x = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    mask = np.array([[True, False, True], [False, True, False]])
    out = T.softmax_rows(x, mask)
    assert out[0, 1] == 0.0 and out[1, 0] == 0.0 and out[1, 2] == 0.0
    assert out[1, 1] == 1.0
    with pytest.raises(T.MaskError):
        T.softmax_rows(x, np.array([[True, True, True], [False, False, False]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(x)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_elementwise_examples():
    assert T.elementwise("tanh", np.array(0.0)) == 0.0
    assert T.elementwise("sigmoid", np.array(0.0)) == 0.5
    np.testing.assert_array_equal(T.elementwise("add", np.array([1, 2]), np.array([3, 4])), [4, 6])
    np.testing.assert_array_equal(T.elementwise("mul", np.array([2.0]), np.array([3.0])), [6.0])
    np.testing.assert_array_equal(T.elementwise("sub", np.array([2.0]), np.array([3.0])), [-1.0])
    with pytest.raises(T.DimensionError):
        T.elementwise("add", np.ones(2), np.ones(3))


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_concat_examples():
    np.testing.assert_array_equal(T.concat([np.array([[1]]), np.array([[2]])], axis=1), [[1, 2]])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.concat([x, np.zeros((2, 0))], axis=1), x)
    assert T.concat([np.ones((2, 3)), np.ones((2, 5))], axis=1).shape == (2, 8)
    with pytest.raises(T.DimensionError):
        T.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_non_finite_is_surfaced():
    with pytest.raises(T.NonFiniteError):
        T.check_finite(np.array([1.0, np.nan]))


def test_rng_streams_are_reproducible_and_keyed():
    a = T.Rng(42).uniform(-1, 1, (5,))
    b = T.Rng(42).uniform(-1, 1, (5,))
    np.testing.assert_array_equal(a, b)
    c1 = T.Rng(42).child(1, 2).random(4)
    parent = T.Rng(42)
    parent.random(100)
    c2 = parent.child(1, 2).random(4)
    np.testing.assert_array_equal(c1, c2)
    assert not np.array_equal(T.Rng(42).child(1, 3).random(4), c1)


def test_primitives_are_deterministic():
    rng = T.Rng(5)
    a, b = rng.uniform(-1, 1, (7, 9)), rng.uniform(-1, 1, (9, 4))
    assert T.matmul(a, b).tobytes() == T.matmul(a, b).tobytes()
    assert T.softmax_rows(a).tobytes() == T.softmax_rows(a).tobytes()


def test_dtype_for_precision():
    assert T.dtype_for(32) == np.float32
    assert T.dtype_for(64) == np.float64
    with pytest.raises(ValueError):
        T.dtype_for(16)
