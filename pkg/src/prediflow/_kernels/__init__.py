"""Kernel backend selection.

The numeric substrate routes its hot inner loops (layer norm, GELU, softmax,
attention, Adam) through this module.  At import time we pick the compiled
Cython extension when it is available and fall back to the pure-numpy
implementations otherwise.  ``PREDIFLOW_BACKEND`` overrides the choice:

    PREDIFLOW_BACKEND=compiled   require the extension (ImportError if absent)
    PREDIFLOW_BACKEND=python     force the numpy fallback
    PREDIFLOW_BACKEND=auto       default behavior
"""

import os

from . import numpy_ops

_choice = os.environ.get("PREDIFLOW_BACKEND", "auto").lower()

if _choice not in ("auto", "compiled", "python"):
    raise ImportError(f"unknown PREDIFLOW_BACKEND value: {_choice!r}")

if _choice == "python":
    _impl = numpy_ops
else:
    try:
        from . import _fastops as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = numpy_ops

BACKEND = _impl.BACKEND

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
attention_fwd = _impl.attention_fwd
adam_step = _impl.adam_step


def get_backend(name: str):
    """Return the named backend module ('python' or 'compiled')."""
    if name == "python":
        return numpy_ops
    if name == "compiled":
        from . import _fastops

        return _fastops
    raise ValueError(f"unknown backend {name!r}")
