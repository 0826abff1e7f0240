"""Autodiff substrate: op semantics and gradients vs central finite differences."""

import numpy as np
import pytest

from prediflow import tensor as T
from prediflow.errors import DimensionError, UsageError
from prediflow.nn import ParamStore, compute_gradients


@pytest.fixture(autouse=True)
def strict_numerics():
    T.set_strict(True)
    yield
    T.set_strict(False)


def rel_err(fn, params, h=1e-5):
    with T.use_dtype(np.float64):
        errs = T.gradcheck(fn, params, h=h)
    return max(errs.values())


def make_param(rng, shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def test_linear_identity():
    x = T.Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    w = T.Tensor(np.eye(2, dtype=np.float32))
    b = T.Tensor(np.zeros(2, dtype=np.float32))
    y = T.linear(x, w, b)
    np.testing.assert_allclose(y.data, [[1.0, 2.0]])


def test_linear_sum_plus_bias():
    x = T.Tensor(np.array([[1.0, 1.0]], dtype=np.float32))
    w = T.Tensor(np.array([[1.0], [1.0]], dtype=np.float32))
    b = T.Tensor(np.array([0.5], dtype=np.float32))
    y = T.linear(x, w, b)
    np.testing.assert_allclose(y.data, [[2.5]])


def test_linear_shape_mismatch():
    x = T.Tensor(np.ones((2, 3), dtype=np.float32))
    w = T.Tensor(np.ones((4, 2), dtype=np.float32))
    with pytest.raises(DimensionError):
        T.linear(x, w)


def test_linear_gradcheck():
    rng = np.random.default_rng(0)
    with T.use_dtype(np.float64):
        x = make_param(rng, (3, 4))
        w = make_param(rng, (4, 5))
        b = make_param(rng, (5,))

        def loss():
            return T.tmean(T.mul(T.linear(x, w, b), T.linear(x, w, b)))

        errs = T.gradcheck(loss, {"x": x, "w": w, "b": b})
    assert max(errs.values()) < 1e-6


def test_layer_norm_constant_input_is_zero():
    x = T.Tensor(np.ones((1, 4), dtype=np.float32))
    y = T.layer_norm(x)
    np.testing.assert_allclose(y.data, np.zeros((1, 4)), atol=1e-6)


def test_layer_norm_two_point():
    # x = [1, -1]: mean 0, var 1, so output is x / sqrt(1 + eps)
    x = T.Tensor(np.array([[1.0, -1.0]], dtype=np.float64))
    y = T.layer_norm(x, eps=1e-5)
    expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y.data, expected, atol=1e-9)


def test_layer_norm_statistics():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((16, 32)).astype(np.float32) * 3 + 1)
    y = T.layer_norm(x).data
    assert np.abs(y.mean(axis=1)).max() < 1e-6
    assert np.abs(y.var(axis=1) - 1).max() < 1e-3


def test_layer_norm_rejects_single_feature():
    with pytest.raises(DimensionError):
        T.layer_norm(T.Tensor(np.ones((3, 1), dtype=np.float32)))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    with T.use_dtype(np.float64):
        x = make_param(rng, (4, 6))
        w = make_param(rng, (6,))

        def loss():
            return T.tmean(T.mul(T.layer_norm(x), w))

        errs = T.gradcheck(loss, {"x": x, "w": w})
    assert max(errs.values()) < 1e-6


def test_attention_single_token_is_value_path():
    rng = np.random.default_rng(3)
    d, heads = 8, 2
    x = T.Tensor(rng.standard_normal((1, d)).astype(np.float32))
    wqkv = T.Tensor(rng.standard_normal((d, 3 * d)).astype(np.float32) * 0.1)
    bqkv = T.Tensor(np.zeros(3 * d, dtype=np.float32))
    wo = T.Tensor(rng.standard_normal((d, d)).astype(np.float32) * 0.1)
    bo = T.Tensor(np.zeros(d, dtype=np.float32))
    out = T.multi_head_attention(x, heads, wqkv, bqkv, wo, bo)
    # softmax over one key is 1: output must equal value projection then wo
    v = x.data @ wqkv.data[:, 2 * d:]
    np.testing.assert_allclose(out.data, v @ wo.data, rtol=1e-5, atol=1e-6)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(4)
    n, d, heads = 5, 8, 4
    x = rng.standard_normal((n, d)).astype(np.float32)
    params = [
        T.Tensor(rng.standard_normal((d, 3 * d)).astype(np.float32) * 0.2),
        T.Tensor(rng.standard_normal(3 * d).astype(np.float32) * 0.1),
        T.Tensor(rng.standard_normal((d, d)).astype(np.float32) * 0.2),
        T.Tensor(rng.standard_normal(d).astype(np.float32) * 0.1),
    ]
    perm = np.array([3, 1, 4, 0, 2])
    out = T.multi_head_attention(T.Tensor(x), heads, *params).data
    out_perm = T.multi_head_attention(T.Tensor(x[perm]), heads, *params).data
    np.testing.assert_allclose(out_perm, out[perm], rtol=1e-4, atol=1e-5)


def test_attention_head_divisibility():
    x = T.Tensor(np.ones((2, 6), dtype=np.float32))
    w = T.Tensor(np.ones((6, 18), dtype=np.float32))
    b = T.Tensor(np.zeros(18, dtype=np.float32))
    wo = T.Tensor(np.ones((6, 6), dtype=np.float32))
    bo = T.Tensor(np.zeros(6, dtype=np.float32))
    with pytest.raises(DimensionError):
        T.multi_head_attention(x, 4, w, b, wo, bo)


def test_attention_gradcheck():
    rng = np.random.default_rng(5)
    with T.use_dtype(np.float64):
        x = make_param(rng, (3, 4))
        wqkv = make_param(rng, (4, 12))
        bqkv = make_param(rng, (12,))
        wo = make_param(rng, (4, 4))
        bo = make_param(rng, (4,))
        params = {"x": x, "wqkv": wqkv, "bqkv": bqkv, "wo": wo, "bo": bo}

        def loss():
            out = T.multi_head_attention(x, 2, wqkv, bqkv, wo, bo)
            return T.tmean(T.mul(out, out))

        errs = T.gradcheck(loss, params)
    assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("op", ["gelu", "sigmoid", "softmax"])
def test_pointwise_gradchecks(op):
    rng = np.random.default_rng(6)
    fn = {"gelu": T.gelu, "sigmoid": T.sigmoid, "softmax": T.softmax}[op]
    with T.use_dtype(np.float64):
        x = make_param(rng, (4, 7))
        w = make_param(rng, (7,))

        def loss():
            return T.tmean(T.mul(fn(x), w))

        errs = T.gradcheck(loss, {"x": x, "w": w})
    assert max(errs.values()) < 1e-6


def test_shape_op_gradchecks():
    rng = np.random.default_rng(7)
    with T.use_dtype(np.float64):
        a = make_param(rng, (2, 3, 4))
        b = make_param(rng, (2, 3, 4))

        def loss():
            joined = T.concat([a, b], axis=2)           # (2, 3, 8)
            piece = T.slice_axis(joined, 2, 2, 6)       # (2, 3, 4)
            moved = T.swapaxes(piece, 0, 1)             # (3, 2, 4)
            return T.tmean(T.mul(moved, moved))

        errs = T.gradcheck(loss, {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(8)
    with T.use_dtype(np.float64):
        a = make_param(rng, (2, 3, 4))
        b = make_param(rng, (2, 4, 3))

        def loss():
            return T.tmean(T.mul(T.matmul(a, b), T.matmul(a, b)))

        errs = T.gradcheck(loss, {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


def test_compute_gradients_sum_is_ones():
    store = ParamStore()
    rng = np.random.default_rng(9)
    p = store.param("p", (3, 2), rng)
    loss = T.tsum(p)
    compute_gradients(loss, store)
    np.testing.assert_allclose(p.grad, np.ones((3, 2)))


def test_compute_gradients_square():
    store = ParamStore()
    p = store.add("p", np.array([1.0, 2.0], dtype=np.float32))
    loss = T.tsum(T.mul(p, p))
    compute_gradients(loss, store)
    np.testing.assert_allclose(p.grad, [2.0, 4.0])


def test_compute_gradients_requires_scalar():
    store = ParamStore()
    p = store.add("p", np.ones(3, dtype=np.float32))
    with pytest.raises(UsageError):
        compute_gradients(T.mul(p, p), store)


def test_backward_clears_tape():
    p = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    y = T.tsum(T.mul(p, p))
    y.backward()
    assert y._backward_fn is None and y._parents == ()


def test_no_grad_builds_no_tape():
    p = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(p, p))
    assert y._backward_fn is None


def test_mean_reduction_axes():
    x = T.Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    np.testing.assert_allclose(T.tmean(x, axis=0).data, x.data.mean(axis=0))
    np.testing.assert_allclose(T.tmean(x, axis=1, keepdims=True).data, x.data.mean(axis=1, keepdims=True))
    np.testing.assert_allclose(T.tsum(x).data, x.data.sum())
