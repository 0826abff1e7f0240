"""Named parameter store, Adam optimizer, and the warmup+cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, default_dtype


class ParamStore:
    """Named, shaped, trainable tensors plus their Adam state.

    Entries are Tensors with ``requires_grad=True`` (or buffers with
    ``requires_grad=False``, e.g. normalization statistics).  Names are unique;
    insertion order is the serialization order.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype if dtype is not None else default_dtype())
        self._entries: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=trainable)
        self._entries[name] = t
        return t

    def param(self, name: str, shape, rng: np.random.Generator, init: str = "fan_in") -> Tensor:
        """Create a trainable parameter; ``init`` is 'fan_in', 'zeros' or 'normal'."""
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "normal":
            value = rng.standard_normal(shape).astype(self.dtype)
        elif init == "fan_in":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            std = 1.0 / math.sqrt(max(fan_in, 1))
            value = (rng.standard_normal(shape) * std).astype(self.dtype)
        else:
            raise UsageError(f"unknown init {init!r}")
        return self.add(name, value)

    def buffer(self, name: str, value: np.ndarray) -> Tensor:
        return self.add(name, value, trainable=False)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self):
        return list(self._entries.keys())

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._entries)

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._entries.items() if t.requires_grad}

    def n_params(self) -> int:
        return sum(t.size for t in self._entries.values() if t.requires_grad)

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def has_grads(self) -> bool:
        return any(t.grad is not None for t in self._entries.values() if t.requires_grad)

    def fingerprint(self) -> int:
        """Order-sensitive hash of all values; used to assert frozen models."""
        h = 0
        for name, t in self._entries.items():
            h = hash((h, name, t.data.tobytes())) & 0xFFFFFFFFFFFFFFFF
        return h

    # -- serialization helpers (PFCK container logic lives in checkpoint.py) --
    def state_arrays(self, include_adam: bool = False) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self._entries.items()}
        if include_adam:
            for n in self._adam_m:
                out[n + "#adam_m"] = self._adam_m[n]
                out[n + "#adam_v"] = self._adam_v[n]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self._entries.items():
            if name not in arrays:
                raise DimensionError(f"checkpoint is missing entry {name!r}")
            value = arrays[name]
            if tuple(value.shape) != tuple(t.shape):
                raise DimensionError(
                    f"checkpoint entry {name!r} has shape {value.shape}, expected {t.shape}"
                )
            t.data = np.ascontiguousarray(value, dtype=self.dtype)
        for name in self._entries:
            m = arrays.get(name + "#adam_m")
            v = arrays.get(name + "#adam_v")
            if m is not None and v is not None:
                self._adam_m[name] = np.ascontiguousarray(m, dtype=self.dtype)
                self._adam_v[name] = np.ascontiguousarray(v, dtype=self.dtype)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another dtype (float64 for gradient checks)."""
        clone = ParamStore(dtype=dtype)
        for name, t in self._entries.items():
            clone.add(name, t.data.astype(clone.dtype), trainable=t.requires_grad)
        clone.step_count = self.step_count
        return clone


def compute_gradients(loss: Tensor, store: ParamStore):
    """Backpropagate ``loss`` and make sure every trainable entry has a grad."""
    if loss.size != 1:
        raise UsageError("loss must be a scalar")
    loss.backward()
    for t in store.trainable().values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update over all trainable entries; zeroes grads afterwards."""
    trainable = store.trainable()
    for name, t in trainable.items():
        if t.grad is None:
            raise UsageError(f"adam_step: parameter {name!r} has no gradient")
        if t.grad.dtype != t.data.dtype:
            raise UsageError(
                f"adam_step: gradient dtype {t.grad.dtype} != parameter dtype "
                f"{t.data.dtype} for {name!r} (a float64 input leaked into the forward pass?)"
            )
    store.step_count += 1
    t_step = store.step_count
    bc1 = 1.0 - beta1**t_step
    bc2 = 1.0 - beta2**t_step
    for name, t in trainable.items():
        if name not in store._adam_m:
            store._adam_m[name] = np.zeros_like(t.data)
            store._adam_v[name] = np.zeros_like(t.data)
        K.adam_step(t.data, t.grad, store._adam_m[name], store._adam_v[name],
                    lr, beta1, beta2, eps, bc1, bc2)
    store.zero_grads()


@dataclass
class LrSchedule:
    """Linear warmup to ``lr_init`` then cosine decay to zero."""

    lr_init: float = 2.5e-4
    warmup_epochs: int = 100
    max_epochs: int = 1000

    def __post_init__(self):
        if not (0 < self.warmup_epochs <= self.max_epochs):
            raise ConfigError("need 0 < warmup_epochs <= max_epochs")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.max_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {schedule.max_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.lr_init * (epoch + 1) / schedule.warmup_epochs
    span = max(schedule.max_epochs - schedule.warmup_epochs, 1)
    progress = (epoch - schedule.warmup_epochs) / span
    return schedule.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))
