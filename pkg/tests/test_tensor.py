import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grouprec.tensor import (
    NumericError,
    SeededRng,
    ShapeError,
    add,
    eye,
    matmul,
    mul,
    rng_matrix,
    scale,
    softmax_rows,
    transpose,
    zeros,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(eye(2), a), a)


def test_matmul_hand_value():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"2x3.*4x2"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_transpose():
    assert transpose([[1, 2], [3, 4]]).tolist() == [[1, 3], [2, 4]]
    assert transpose([[7.5]]).tolist() == [[7.5]]


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_transpose_involution(a):
    np.testing.assert_array_equal(transpose(transpose(a)), a)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[0, 0, 0]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[1000.0, 1000.0]]), [[0.5, 0.5]])
    # exp(1)/(exp(1)+exp(2)) by hand
    np.testing.assert_allclose(softmax_rows([[1.0, 2.0]]), [[0.26894, 0.73106]], atol=1e-4)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_rows([[0.0, math.nan]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-700, 700)),
       st.floats(-100, 100))
def test_softmax_rows_stochastic_and_shift_invariant(a, c):
    s = softmax_rows(a)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax_rows(a + c), s, atol=1e-9)


def test_elementwise_and_scale():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_array_equal(add(a, zeros(2, 2)), a)
    assert mul([[2]], [[3]]).tolist() == [[6.0]]
    np.testing.assert_array_equal(scale(a, 0), zeros(2, 2))
    with pytest.raises(ShapeError):
        add(a, np.ones((2, 3)))


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32))
def test_matmul_associative(n, k, m, p, seed):
    g = np.random.default_rng(seed)
    a, b, c = g.normal(size=(n, k)), g.normal(size=(k, m)), g.normal(size=(m, p))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


def test_rng_matrix_deterministic_and_in_range():
    a = rng_matrix(SeededRng(3), 4, 5, -2.0, 0.5)
    b = rng_matrix(SeededRng(3), 4, 5, -2.0, 0.5)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= -2.0 and a.max() < 0.5


def test_rng_matrix_mean_law_of_large_numbers():
    m = rng_matrix(SeededRng(0), 100, 100, -1.0, 1.0)
    assert abs(m.mean()) < 0.05


def test_rng_matrix_rejects_bad_range():
    with pytest.raises(ValueError):
        rng_matrix(SeededRng(0), 2, 2, 1.0, 1.0)


def test_child_streams_independent_of_parent_consumption():
    parent = SeededRng(9)
    before = parent.child("x").uniform(0, 1, 3)
    parent.uniform(0, 1, 100)
    np.testing.assert_array_equal(parent.child("x").uniform(0, 1, 3), before)
    assert not np.array_equal(parent.child("y").uniform(0, 1, 3), before)
