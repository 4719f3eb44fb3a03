"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``VLTSEG_PURE=1`` in the environment to force the pure-Python path.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VLTSEG_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

matmul3 = _impl.matmul3


def use(backend):
    """Switch the active backend at runtime (used by the benchmark)."""
    global matmul3, BACKEND
    if backend == "python":
        matmul3 = _pykernels.matmul3
    elif backend == "cython":
        from . import _kernels as _compiled

        matmul3 = _compiled.matmul3
    else:
        raise ValueError(f"unknown backend {backend!r}")
    BACKEND = backend
