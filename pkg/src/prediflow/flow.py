"""Flow-Matching engine: optimal-transport path, training loss, samplers.

The probability path is the straight-line interpolation x_t = t*x1 + (1-t)*x0
from a standard-normal source to the target; the velocity network regresses
the constant path velocity x1 - x0.  Because the path is straight, a single
unit-length Euler step from t=0 generates samples; the residual refiner's
targets are pre-scaled by alpha, so samplers divide it back out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Tensor, assert_finite, scale, sub, tmean, mul


@dataclass
class FlowTime:
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise UsageError(f"flow time {self.t} outside [0, 1]")


@dataclass
class FlowSample:
    """A matched (source, target, interpolant) triple on the OT path."""

    x0: np.ndarray
    x1: np.ndarray
    xt: np.ndarray
    t: float


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Linear interpolation t*x1 + (1-t)*x0; t is a scalar or per-sample array."""
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate shapes disagree: {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=x0.dtype)
    if t_arr.ndim > 0:
        t_arr = t_arr.reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise UsageError("flow time outside [0, 1]")
    return t_arr * x1 + (1 - t_arr) * x0


def make_flow_sample(x0: np.ndarray, x1: np.ndarray, t: float) -> FlowSample:
    return FlowSample(x0, x1, interpolate(x0, x1, t), t)


def fm_loss(u_pred: Tensor, x0: np.ndarray, x1: np.ndarray) -> Tensor:
    """Mean squared error between predicted and OT path velocity (x1 - x0).

    Mean is over all elements, batch included.  For the residual refiner,
    x1 is the alpha-scaled residual.
    """
    if x0.shape != x1.shape or tuple(u_pred.shape) != x0.shape:
        raise DimensionError(
            f"fm_loss shapes disagree: u={tuple(u_pred.shape)}, x0={x0.shape}, x1={x1.shape}"
        )
    diff = sub(u_pred, Tensor((x1 - x0).astype(u_pred.data.dtype, copy=False)))
    return tmean(mul(diff, diff))


def sample_one_step(u_net, x0: np.ndarray, conditions, alpha: float) -> np.ndarray:
    """Single unit-length Euler step from t=0, then undo the alpha scaling.

    ``u_net(x, conditions, t)`` must return the velocity as an ndarray.
    """
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    d = u_net(x0, conditions, 0.0)
    out = (x0 + d) / np.asarray(alpha, dtype=x0.dtype)
    assert_finite(out, "one-step sample")
    return out


def time_features(t, dim: int, omega_max: float = 100.0, omega_min: float = 0.5) -> np.ndarray:
    """Sinusoidal features of flow time t in [0, 1], shape (..., dim).

    Frequencies are geometrically spaced and capped so the feature map stays
    smooth in t (the conditioning MLP sees a Lipschitz input).
    """
    if dim % 2 != 0:
        raise UsageError("time feature dimension must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise UsageError("flow time outside [0, 1]")
    half = dim // 2
    omega = omega_max * (omega_min / omega_max) ** (np.arange(half) / max(half - 1, 1))
    phase = t_arr[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def sample_euler(u_net, x0: np.ndarray, conditions, steps: int, alpha: float) -> np.ndarray:
    """Explicit Euler over a uniform grid on [0, 1]; steps=1 equals
    sample_one_step bit for bit."""
    if steps < 1:
        raise UsageError("steps must be >= 1")
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    dt = x0.dtype.type(1.0 / steps)
    x = x0
    for i in range(steps):
        t = i / steps
        x = x + u_net(x, conditions, t) * dt
    out = x / np.asarray(alpha, dtype=x0.dtype)
    assert_finite(out, "euler sample")
    return out
