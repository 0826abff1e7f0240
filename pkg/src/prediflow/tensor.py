"""Tape-based reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; ops build an
implicit graph which ``backward`` walks in reverse topological order.  The
substrate is deliberately small: dense float32/float64 tensors, the layers the
motion models need, and nothing else.  Elementwise/normalization inner loops
are routed through the kernel backend (compiled or numpy, chosen at import).

Float32 is the working precision; float64 exists for gradient checking — use
``use_dtype(np.float64)`` around parameter creation and forward passes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import _kernels as K
from .errors import DimensionError, NumericError, UsageError

_DEFAULT_DTYPE = np.float32
_STRICT = False
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_strict(flag: bool):
    """When strict, every op output is checked for NaN/Inf (slow; tests)."""
    global _STRICT
    _STRICT = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording (frozen-model forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def assert_finite(arr, context: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------------
    def backward(self):
        """Backpropagate from a scalar; clears the tape it touched."""
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or node._backward_fn is None:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward_fn()
            node._parents = ()
            node._backward_fn = None
            if node is not self and not node.requires_grad:
                node.grad = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wants(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


def _needs_grad(*tensors) -> bool:
    return _GRAD_ENABLED and any(_wants(t) for t in tensors)


def _make(data) -> Tensor:
    if _STRICT:
        assert_finite(data, "op output")
    return Tensor(data)


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data)
    if _needs_grad(a, b):

        def bwd():
            g = out.grad
            if _wants(a):
                _accum(a, _unbroadcast(g, a.shape))
            if _wants(b):
                _accum(b, _unbroadcast(g, b.shape))

        out._parents, out._backward_fn = (a, b), bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data - b.data)
    if _needs_grad(a, b):

        def bwd():
            g = out.grad
            if _wants(a):
                _accum(a, _unbroadcast(g, a.shape))
            if _wants(b):
                _accum(b, _unbroadcast(-g, b.shape))

        out._parents, out._backward_fn = (a, b), bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data)
    if _needs_grad(a, b):

        def bwd():
            g = out.grad
            if _wants(a):
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if _wants(b):
                _accum(b, _unbroadcast(g * a.data, b.shape))

        out._parents, out._backward_fn = (a, b), bwd
    return out


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.data.dtype.type(s)
    out = _make(a.data * s)
    if _needs_grad(a):

        def bwd():
            _accum(a, out.grad * s)

        out._parents, out._backward_fn = (a,), bwd
    return out


def add_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data + a.data.dtype.type(c))
    if _needs_grad(a):

        def bwd():
            _accum(a, out.grad)

        out._parents, out._backward_fn = (a,), bwd
    return out


def matmul(a, b) -> Tensor:
    """a @ b for (..., n, k) @ (k, m) or batch-matched (..., n, k) @ (..., k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data)
    if _needs_grad(a, b):

        def bwd():
            g = out.grad
            if _wants(a):
                _accum(a, g @ b.data.swapaxes(-1, -2))
            if _wants(b):
                if b.ndim == 2:
                    k = a.shape[-1]
                    _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    _accum(b, a.data.swapaxes(-1, -2) @ g)

        out._parents, out._backward_fn = (a, b), bwd
    return out


# -- shape ops ----------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape))
    if _needs_grad(a):

        def bwd():
            _accum(a, out.grad.reshape(a.shape))

        out._parents, out._backward_fn = (a,), bwd
    return out


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.swapaxes(ax1, ax2))
    if _needs_grad(a):

        def bwd():
            _accum(a, out.grad.swapaxes(ax1, ax2))

        out._parents, out._backward_fn = (a,), bwd
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis))
    if _needs_grad(*tensors):
        sizes = [t.shape[axis] for t in tensors]

        def bwd():
            g = out.grad
            offset = 0
            for t, s in zip(tensors, sizes):
                if _wants(t):
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + s)
                    _accum(t, g[tuple(idx)])
                offset += s

        out._parents, out._backward_fn = tuple(tensors), bwd
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _make(a.data[idx])
    if _needs_grad(a):

        def bwd():
            g = np.zeros(a.shape, dtype=a.dtype)
            g[idx] = out.grad
            _accum(a, g)

        out._parents, out._backward_fn = (a,), bwd
    return out


# -- reductions ---------------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims))
    if _needs_grad(a):

        def bwd():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        out._parents, out._backward_fn = (a,), bwd
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    out = _make(data)
    if _needs_grad(a):
        n = a.data.size // max(data.size, 1)

        def bwd():
            g = out.grad / a.data.dtype.type(n)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        out._parents, out._backward_fn = (a,), bwd
    return out


# -- nonlinearities and normalization -------------------------------------------
def gelu(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(K.gelu_fwd(a.data))
    if _needs_grad(a):

        def bwd():
            _accum(a, K.gelu_bwd(a.data, out.grad))

        out._parents, out._backward_fn = (a,), bwd
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(K.sigmoid_fwd(a.data))
    if _needs_grad(a):

        def bwd():
            _accum(a, K.sigmoid_bwd(out.data, out.grad))

        out._parents, out._backward_fn = (a,), bwd
    return out


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    n = a.shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, n))
    out = _make(K.softmax_fwd(flat).reshape(a.shape))
    if _needs_grad(a):

        def bwd():
            dy = np.ascontiguousarray(out.grad.reshape(-1, n))
            yy = np.ascontiguousarray(out.data.reshape(-1, n))
            _accum(a, K.softmax_bwd(yy, dy).reshape(a.shape))

        out._parents, out._backward_fn = (a,), bwd
    return out


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, no learned affine.

    Scale and shift, when wanted, are the caller's business (the refiner
    applies them via its conditional modulation path).
    """
    a = _as_tensor(a)
    d = a.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a feature axis of size >= 2")
    flat = np.ascontiguousarray(a.data.reshape(-1, d))
    y, rstd = K.layer_norm_fwd(flat, eps)
    out = _make(y.reshape(a.shape))
    if _needs_grad(a):

        def bwd():
            dy = np.ascontiguousarray(out.grad.reshape(-1, d))
            yy = np.ascontiguousarray(out.data.reshape(-1, d))
            _accum(a, K.layer_norm_bwd(dy, yy, rstd).reshape(a.shape))

        out._parents, out._backward_fn = (a,), bwd
    return out


# -- composite layers ------------------------------------------------------------
def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b); x is (..., in), w is (in, out), b is (out,).

    Stacked inputs are flattened to one GEMM instead of a loop of small ones.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    squeeze = x.ndim > 2
    if squeeze:
        x = reshape(x, (-1, x.shape[-1]))
    y = matmul(x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        y = add(y, b)
    if squeeze:
        y = reshape(y, lead + (w.shape[1],))
    return y


def multi_head_attention(x, heads: int, wqkv, bqkv, wo, bo) -> Tensor:
    """Standard multi-head scaled-dot-product self-attention, full (no mask).

    x: (..., n, d). wqkv: (d, 3d) fused projection, wo: (d, d).  With the tape
    disabled the attention core runs through the fused kernel backend.
    """
    x = _as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    if d % heads != 0:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads
    lead = x.shape[:-2]
    bflat = 1
    for s in lead:
        bflat *= s

    if not _GRAD_ENABLED:
        qkv = (x.data.reshape(-1, d) @ wqkv.data) + bqkv.data
        qkv = qkv.reshape(bflat, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
        q = np.ascontiguousarray(qkv[0].reshape(bflat * heads, n, hd))
        k = np.ascontiguousarray(qkv[1].reshape(bflat * heads, n, hd))
        v = np.ascontiguousarray(qkv[2].reshape(bflat * heads, n, hd))
        ctx = K.attention_fwd(q, k, v, 1.0 / np.sqrt(hd))
        ctx = ctx.reshape(bflat, heads, n, hd).transpose(0, 2, 1, 3).reshape(-1, d)
        out = (ctx @ wo.data) + bo.data
        return _make(out.reshape(lead + (n, d)))

    qkv = linear(x, wqkv, bqkv)                             # (..., n, 3d)
    qkv = reshape(qkv, (bflat, n, 3, heads, hd))
    qkv = swapaxes(qkv, 1, 3)                               # (b, heads, 3, n, hd)
    q = reshape(slice_axis(qkv, 2, 0, 1), (bflat, heads, n, hd))
    k = reshape(slice_axis(qkv, 2, 1, 2), (bflat, heads, n, hd))
    v = reshape(slice_axis(qkv, 2, 2, 3), (bflat, heads, n, hd))

    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
    attn = softmax(scores)
    ctx = matmul(attn, v)                                   # (b, heads, n, hd)
    ctx = reshape(swapaxes(ctx, 1, 2), lead + (n, d))
    return linear(ctx, wo, bo)


# -- gradient checking -------------------------------------------------------------
def finite_difference_gradient(fn, param: Tensor, h: float = 1e-5,
                               indices=None) -> np.ndarray:
    """Central-difference d fn() / d param (float64 work).

    ``indices`` restricts the sweep to a subset of flat positions; untouched
    entries come back as NaN so callers can mask them.
    """
    base = param.data
    flat = base.reshape(-1)
    if indices is None:
        indices = range(flat.size)
        g = np.zeros_like(base)
    else:
        g = np.full_like(base, np.nan)
    gflat = g.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalized by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def gradcheck(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
              sample: int | None = None, rng=None) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    loss_fn must rebuild the forward pass from the current param data and
    return a scalar Tensor.  Returns the per-parameter max relative error.
    Call under ``use_dtype(np.float64)`` with float64 params.  ``sample``
    caps the number of finite-difference probes per parameter tensor.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None

    errors = {}
    for name, p in params.items():
        indices = None
        if sample is not None and p.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(p.size, size=sample, replace=False)
        numeric = finite_difference_gradient(lambda: loss_fn().item(), p, h, indices=indices)
        mask = ~np.isnan(numeric)
        # normalize by the whole tensor's gradient scale (with a floor) so a
        # probe landing on near-zero entries is not swamped by FD round-off
        denom = max(
            float(np.abs(analytic[name]).max(initial=0.0)),
            float(np.abs(numeric[mask]).max(initial=0.0)),
            1e-5,
        )
        errors[name] = float(np.abs(analytic[name][mask] - numeric[mask]).max(initial=0.0) / denom)
    return errors
