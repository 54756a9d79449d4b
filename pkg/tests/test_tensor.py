import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slimformer.tensor import (
    ShapeError,
    gelu,
    gelu_grad,
    gemm_f32,
    layer_norm,
    log_softmax_rows,
    mac_counter,
    relu,
    softmax_rows,
)


def test_gemm_hand_cases():
    a = np.array([[1.0, 2.0]], dtype=np.float32)
    b = np.array([[3.0], [4.0]], dtype=np.float32)
    assert gemm_f32(a, b).tolist() == [[11.0]]
    out = gemm_f32(np.array([[1.0]], np.float32), np.array([[-5.0]], np.float32), np.array([2.0], np.float32), "relu")
    assert out.tolist() == [[0.0]]


def test_gemm_identity_is_exact(rng):
    a = rng.standard_normal((5, 7)).astype(np.float32)
    assert np.array_equal(gemm_f32(a, np.eye(7, dtype=np.float32)), a)
    b = rng.standard_normal((2, 2)).astype(np.float32)
    assert np.array_equal(gemm_f32(np.eye(2, dtype=np.float32), b), b)


def test_gemm_gelu_epilogue(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 5)).astype(np.float32)
    bias = rng.standard_normal(5).astype(np.float32)
    np.testing.assert_allclose(gemm_f32(a, b, bias, "gelu"), gelu(a @ b + bias), rtol=1e-6)


@pytest.mark.parametrize(
    "a_shape,b_shape,bias",
    [((2, 3), (4, 2), None), ((2, 3), (3, 2), np.zeros(3, np.float32)), ((3,), (3, 2), None)],
)
def test_gemm_shape_errors(a_shape, b_shape, bias):
    with pytest.raises(ShapeError):
        gemm_f32(np.zeros(a_shape, np.float32), np.zeros(b_shape, np.float32), bias)


def test_gemm_unknown_epilogue():
    with pytest.raises(ValueError):
        gemm_f32(np.ones((1, 1), np.float32), np.ones((1, 1), np.float32), epilogue="tanh")


def test_gemm_counts_macs():
    with mac_counter() as c:
        gemm_f32(np.ones((3, 4), np.float32), np.ones((4, 5), np.float32))
    assert c.total == 60


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], rtol=1e-12)


def test_softmax_nan_propagates():
    out = softmax_rows(np.array([[np.nan, 1.0], [0.0, 0.0]]))
    assert np.isnan(out[0]).all()
    np.testing.assert_allclose(out[1], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax_rows(x).sum(axis=1), 1.0, atol=1e-6)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(log_softmax_rows(x), np.log(softmax_rows(x)), atol=1e-12)


def test_layer_norm_examples():
    one = np.ones(3)
    np.testing.assert_allclose(layer_norm(np.array([[1.0, 1.0, 1.0]]), one, np.zeros(3)), [[0, 0, 0]])
    np.testing.assert_allclose(layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), 1e-30), [[1, -1]])
    # mean 3, std 1: (x - 3) * 3 + 1
    np.testing.assert_allclose(layer_norm(np.array([[2.0, 4.0]]), np.full(2, 3.0), np.ones(2)), [[-2.0, 4.0]])
    with pytest.raises(ValueError):
        layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    if np.any(x.var(axis=1) < 1e-3):
        return
    y = layer_norm(x, np.ones(x.shape[1]), np.zeros(x.shape[1]))
    assert np.all(np.abs(y.mean(axis=1)) <= 1e-6)
    assert np.all(np.abs(y.var(axis=1) - 1) <= 1e-4)


def test_activations():
    assert gelu(np.float64(0.0)) == 0.0
    assert relu(np.array([-3.0]))[0] == 0.0 and relu(np.array([3.0]))[0] == 3.0
    # 0.5 * (1 + tanh(0.7978845608 * 1.044715)) by hand
    assert round(float(gelu(np.float64(1.0))), 4) == 0.8412
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)
