"""Compiled kernels must agree with the numpy fallback on both dtypes."""

import numpy as np
import pytest

from prediflow import _kernels as K
from prediflow._kernels import numpy_ops

try:
    from prediflow._kernels import _fastops
except ImportError:
    _fastops = None

pytestmark = pytest.mark.skipif(_fastops is None, reason="compiled extension not built")

DTYPES = [np.float32, np.float64]


def tol(dtype):
    # float32 kernels use polynomial transcendentals (~1e-7 relative); the
    # bound reflects that error amplified through derivative formulas.
    return dict(rtol=2e-4, atol=2e-5) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("dtype", DTYPES)
def test_layer_norm_matches(dtype):
    rng = np.random.default_rng(0)
    x = np.ascontiguousarray(rng.standard_normal((37, 24)).astype(dtype) * 3 + 1)
    y_c, r_c = _fastops.layer_norm_fwd(x, 1e-5)
    y_p, r_p = numpy_ops.layer_norm_fwd(x, 1e-5)
    np.testing.assert_allclose(y_c, y_p, **tol(dtype))
    np.testing.assert_allclose(r_c, r_p, **tol(dtype))
    dy = np.ascontiguousarray(rng.standard_normal(x.shape).astype(dtype))
    np.testing.assert_allclose(
        _fastops.layer_norm_bwd(dy, np.ascontiguousarray(y_c), r_c),
        numpy_ops.layer_norm_bwd(dy, y_p, r_p),
        **tol(dtype),
    )


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("op", ["gelu", "sigmoid"])
def test_pointwise_matches(dtype, op):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 7, 3)).astype(dtype) * 4
    dy = rng.standard_normal(x.shape).astype(dtype)
    if op == "gelu":
        np.testing.assert_allclose(_fastops.gelu_fwd(x), numpy_ops.gelu_fwd(x), **tol(dtype))
        np.testing.assert_allclose(_fastops.gelu_bwd(x, dy), numpy_ops.gelu_bwd(x, dy), **tol(dtype))
    else:
        y_c = _fastops.sigmoid_fwd(x)
        y_p = numpy_ops.sigmoid_fwd(x)
        np.testing.assert_allclose(y_c, y_p, **tol(dtype))
        np.testing.assert_allclose(_fastops.sigmoid_bwd(y_c, dy), numpy_ops.sigmoid_bwd(y_p, dy), **tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_matches(dtype):
    rng = np.random.default_rng(2)
    x = np.ascontiguousarray(rng.standard_normal((23, 11)).astype(dtype) * 6)
    y_c = _fastops.softmax_fwd(x)
    y_p = numpy_ops.softmax_fwd(x)
    np.testing.assert_allclose(y_c, y_p, **tol(dtype))
    dy = np.ascontiguousarray(rng.standard_normal(x.shape).astype(dtype))
    np.testing.assert_allclose(_fastops.softmax_bwd(y_c, dy), numpy_ops.softmax_bwd(y_p, dy), **tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_attention_matches(dtype):
    rng = np.random.default_rng(3)
    q, k, v = (np.ascontiguousarray(rng.standard_normal((6, 9, 8)).astype(dtype)) for _ in range(3))
    np.testing.assert_allclose(
        _fastops.attention_fwd(q, k, v, 0.35),
        numpy_ops.attention_fwd(q, k, v, 0.35),
        **tol(dtype),
    )


@pytest.mark.parametrize("dtype", DTYPES)
def test_adam_matches(dtype):
    rng = np.random.default_rng(4)
    shapes = dict(p=(13,), g=(13,), m=(13,), v=(13,))
    a = {n: rng.standard_normal(s).astype(dtype) for n, s in shapes.items()}
    a["v"] = np.abs(a["v"])
    b = {n: arr.copy() for n, arr in a.items()}
    args = (1e-3, 0.9, 0.999, 1e-8, 1 - 0.9**3, 1 - 0.999**3)
    _fastops.adam_step(a["p"], a["g"], a["m"], a["v"], *args)
    numpy_ops.adam_step(b["p"], b["g"], b["m"], b["v"], *args)
    for n in ("p", "m", "v"):
        np.testing.assert_allclose(a[n], b[n], **tol(dtype))


def test_backend_selector():
    assert K.BACKEND in ("compiled", "python")
    assert K.get_backend("python") is numpy_ops
