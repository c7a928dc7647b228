"""Kernel backend selection.

The compiled extension is used when importable; otherwise the pure-NumPy
fallback. Set EPGD_KERNELS=numpy (or =cython) to force a backend; forcing
cython raises if the extension was not built.
"""

import os

from . import _numpy

_requested = os.environ.get("EPGD_KERNELS", "auto").lower()

if _requested not in ("auto", "numpy", "cython"):
    raise ValueError(f"EPGD_KERNELS must be auto, numpy or cython, got {_requested!r}")

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _convpool as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _numpy
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def available_backends():
    """Name -> module for every importable backend (used by tests/benchmarks)."""
    out = {"numpy": _numpy}
    try:
        from . import _convpool
        out["cython"] = _convpool
    except ImportError:
        pass
    return out
