"""Pure-numpy fallback implementations of the hot kernels.

Signature-compatible with the compiled extension in ``_fastops.pyx``; the
package selects one of the two at import time (see ``__init__``).  All
functions accept float32 or float64 arrays and preserve the input dtype.
"""

import numpy as np

BACKEND = "python"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def layer_norm_fwd(x, eps):
    """Normalize the last axis of 2-D ``x`` to zero mean, unit variance.

    Returns (y, rstd) where rstd is the per-row 1/sqrt(var + eps); the
    normalized output doubles as the saved tensor for the backward pass.
    """
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    return xc * rstd, rstd


def layer_norm_bwd(dy, y, rstd):
    """Gradient of layer_norm_fwd; ``y`` is the normalized output."""
    d = dy.shape[1]
    s1 = dy.sum(axis=1, keepdims=True)
    s2 = (dy * y).sum(axis=1, keepdims=True)
    return rstd * (dy - (s1 + y * s2) / d)


def gelu_fwd(x):
    """GELU, tanh approximation; written in-place to avoid temporacy churn."""
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x                 # x + A*x^3
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_bwd(x, dy):
    x2 = x * x
    inner = x2 * _GELU_A
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    dinner = x2
    dinner *= 3.0 * _GELU_A
    dinner += 1.0
    dinner *= _GELU_C      # d inner / dx
    out = 1.0 - t * t      # sech^2
    out *= dinner
    out *= x
    out += t
    out += 1.0
    out *= 0.5
    out *= dy
    return out


def sigmoid_fwd(x):
    # exp(-|x|) never overflows; reconstruct both signs from it
    e = np.abs(x)
    np.negative(e, out=e)
    np.exp(e, out=e)             # exp(-|x|) in (0, 1]
    denom = e + 1.0
    out = np.where(x >= 0, 1.0, e)
    out /= denom
    return out


def sigmoid_bwd(y, dy):
    out = 1.0 - y
    out *= y
    out *= dy
    return out


def softmax_fwd(x):
    """Row-wise softmax of a 2-D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def attention_fwd(q, k, v, scale):
    """Fused scaled-dot-product attention for frozen-model inference.

    q, k, v: (B, n, hd) stacks (head and batch axes flattened together).
    """
    scores = (q @ k.swapaxes(-1, -2)) * np.asarray(scale, dtype=q.dtype)
    b, n, _ = scores.shape
    attn = softmax_fwd(scores.reshape(b * n, n)).reshape(b, n, n)
    return attn @ v


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One in-place Adam update; bc1/bc2 are the bias-correction factors."""
    one = p.dtype.type(1.0)
    b1 = p.dtype.type(beta1)
    b2 = p.dtype.type(beta2)
    m *= b1
    m += (one - b1) * g
    v *= b2
    v += (one - b2) * (g * g)
    mhat = m / p.dtype.type(bc1)
    vhat = v / p.dtype.type(bc2)
    p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(eps))
