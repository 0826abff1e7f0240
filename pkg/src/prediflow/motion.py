"""Motion sequences and the frequency-domain algebra used throughout.

Whole motion sequences (history + future, length L = T + F) are represented by
their orthonormal DCT-II coefficients along time, truncated to the tau lowest
frequencies per coordinate channel.  Predictions are composed by adding a
frequency-domain residual to an initial coefficient estimate and inverting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

RATE_HZ = 60.0


@dataclass
class MotionSequence:
    """Time-indexed 3D joint coordinates for one agent, meters, (L, D) layout.

    D is 3*J for a human skeleton or 3*K for robot keypoints.  Human and robot
    sequences share one frame with the origin at the robot base.
    """

    values: np.ndarray
    rate: float = RATE_HZ
    agent: str = "human"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DimensionError(f"motion values must be (L, D) with L >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("motion sequence contains non-finite coordinates")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def future(self, T: int) -> np.ndarray:
        """Frames T..L-1, the predicted-future segment."""
        return self.values[T:]


@dataclass
class FreqCoeffs:
    """Truncated orthonormal DCT-II coefficients, (D, tau) layout."""

    coeffs: np.ndarray
    full_length: int

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.ndim != 2:
            raise DimensionError(f"coefficients must be (D, tau), got {self.coeffs.shape}")
        if self.coeffs.shape[1] > self.full_length:
            raise ConfigError(
                f"tau={self.coeffs.shape[1]} exceeds sequence length {self.full_length}"
            )

    @property
    def tau(self) -> int:
        return self.coeffs.shape[1]


@dataclass
class Residual:
    """Frequency-domain correction with the same shape as the initial estimate."""

    coeffs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


_BASIS_CACHE: dict = {}


def dct_basis(L: int, tau: int, dtype=np.float32) -> np.ndarray:
    """Rows are the first tau orthonormal DCT-II basis functions of length L."""
    if tau > L:
        raise ConfigError(f"tau={tau} exceeds sequence length L={L}")
    key = (L, tau, np.dtype(dtype).str)
    basis = _BASIS_CACHE.get(key)
    if basis is None:
        n = np.arange(L, dtype=np.float64)
        k = np.arange(tau, dtype=np.float64)[:, None]
        basis = np.cos(np.pi * (2.0 * n[None, :] + 1.0) * k / (2.0 * L))
        basis *= np.sqrt(2.0 / L)
        basis[0, :] = np.sqrt(1.0 / L)
        basis = basis.astype(dtype)
        _BASIS_CACHE[key] = basis
    return basis


def dct_arr(x: np.ndarray, tau: int) -> np.ndarray:
    """(..., L, D) time-major values -> (..., D, tau) coefficients."""
    L = x.shape[-2]
    basis = dct_basis(L, tau, x.dtype)
    return np.swapaxes(basis @ x, -1, -2)


def idct_arr(y: np.ndarray, L: int) -> np.ndarray:
    """(..., D, tau) coefficients -> (..., L, D); truncated terms are zero."""
    tau = y.shape[-1]
    if tau > L:
        raise ConfigError(f"tau={tau} exceeds requested length L={L}")
    basis = dct_basis(L, tau, y.dtype)
    return np.swapaxes(y @ basis, -1, -2)


def pad_observation(obs: MotionSequence, F: int) -> MotionSequence:
    """Extend an observation by repeating its last frame F times."""
    if F < 0:
        raise ConfigError("padding length must be >= 0")
    if F == 0:
        return obs
    tail = np.repeat(obs.values[-1:], F, axis=0)
    return MotionSequence(np.concatenate([obs.values, tail], axis=0), obs.rate, obs.agent)


def pad_values(values: np.ndarray, F: int) -> np.ndarray:
    if F == 0:
        return values
    return np.concatenate([values, np.repeat(values[-1:], F, axis=0)], axis=0)


def dct(x: MotionSequence, tau: int) -> FreqCoeffs:
    return FreqCoeffs(dct_arr(x.values, tau), full_length=len(x))


def idct(y: FreqCoeffs, L: int, rate: float = RATE_HZ, agent: str = "human") -> MotionSequence:
    return MotionSequence(idct_arr(y.coeffs, L), rate, agent)


def residual(truth: FreqCoeffs, init: FreqCoeffs) -> Residual:
    if truth.coeffs.shape != init.coeffs.shape:
        raise DimensionError(
            f"residual shapes disagree: {truth.coeffs.shape} vs {init.coeffs.shape}"
        )
    return Residual(truth.coeffs - init.coeffs)


def compose(init: FreqCoeffs, delta: Residual, L: int, rate: float = RATE_HZ) -> MotionSequence:
    """Final prediction: invert (initial coefficients + residual) to the time domain."""
    if delta.coeffs.shape != init.coeffs.shape:
        raise DimensionError(
            f"compose shapes disagree: {init.coeffs.shape} vs {delta.coeffs.shape}"
        )
    return MotionSequence(idct_arr(init.coeffs + delta.coeffs, L), rate, "human")
