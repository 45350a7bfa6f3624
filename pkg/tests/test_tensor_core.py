import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leanpn.tensor_core import (
    DimensionError,
    InvalidInputError,
    ewise,
    kaiming_uniform,
    make_rng,
    matmul,
    reduce_max_axis,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), x), x)


def test_matmul_row_col():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop_exactly():
    rng = make_rng(3)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_ewise_examples():
    assert ewise("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert ewise("add", np.array([1.0, 2.0]), np.array([3.0, 4.0])).tolist() == [4.0, 6.0]
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ewise("scale", x, c=0), np.zeros((2, 3)))


def test_ewise_bias_broadcast_and_rejects_others():
    x = np.ones((4, 3))
    assert np.array_equal(ewise("add", x, np.array([1.0, 2.0, 3.0]))[0], [2.0, 3.0, 4.0])
    with pytest.raises(DimensionError):
        ewise("add", x, np.ones(4))
    with pytest.raises(DimensionError):
        ewise("mul", x, np.ones((3, 3)))


def test_ewise_commutes_with_reshape():
    rng = make_rng(0)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    for op in ("add", "sub", "mul"):
        assert np.array_equal(ewise(op, a, b).reshape(3, 8), ewise(op, a.reshape(3, 8), b.reshape(3, 8)))


def test_reduce_max_examples():
    v, i = reduce_max_axis(np.array([[1.0, 5.0, 3.0]]), 1)
    assert v.tolist() == [5.0] and i.tolist() == [1]
    v, i = reduce_max_axis(np.array([[2.0, 2.0]]), 1)
    assert v.tolist() == [2.0] and i.tolist() == [0]


def test_reduce_max_matches_scan():
    a = make_rng(1).normal(size=(4, 6))
    v, idx = reduce_max_axis(a, 1)
    for r in range(4):
        best, arg = a[r, 0], 0
        for j in range(1, 6):
            if a[r, j] > best:
                best, arg = a[r, j], j
        assert v[r] == best and idx[r] == arg


def test_reduce_max_empty_axis():
    with pytest.raises(InvalidInputError):
        reduce_max_axis(np.zeros((3, 0)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6))
def test_reduce_max_permutation_equivariant(seed, width):
    rng = make_rng(seed)
    a = rng.integers(-3, 3, size=(5, width)).astype(float)
    perm = rng.permutation(width)
    v, idx = reduce_max_axis(a, 1)
    vp, idxp = reduce_max_axis(a[:, perm], 1)
    assert np.array_equal(v, vp)
    # the winner of the permuted row holds the same value
    assert np.array_equal(a[np.arange(5), perm[idxp]], v)


def test_rng_reproducible():
    a = kaiming_uniform(make_rng(7), 10, (10, 4))
    b = kaiming_uniform(make_rng(7), 10, (10, 4))
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= np.sqrt(6 / 10)
