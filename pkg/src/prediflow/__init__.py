"""Prediction-refinement framework for stochastic human motion forecasting."""

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]


def __getattr__(name):
    # lazy so the CLI can pin thread counts before numpy loads
    if name == "kernel_backend":
        from ._kernels import BACKEND

        return BACKEND
    raise AttributeError(name)
