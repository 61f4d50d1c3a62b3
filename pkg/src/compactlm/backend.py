"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  ``COMPACTLM_BACKEND=python`` forces the fallback and
``COMPACTLM_BACKEND=native`` makes a missing extension an error.
"""

import os

from . import _fallback

_requested = os.environ.get("COMPACTLM_BACKEND", "auto").lower()
if _requested not in ("auto", "native", "python"):
    raise ImportError(f"COMPACTLM_BACKEND must be auto, native or python, got {_requested!r}")

_native = None
if _requested != "python":
    try:
        from . import _kernels as _native
    except ImportError:
        if _requested == "native":
            raise

NAME = "native" if _native is not None else "python"
_impl = _native if _native is not None else _fallback


def get(name):
    """Return the kernel module for ``name`` ("native" or "python")."""
    if name == "python":
        return _fallback
    if name == "native":
        if _native is None:
            raise RuntimeError("compiled kernels are not built")
        return _native
    raise ValueError(name)


def native_available():
    return _native is not None


def counter_bits(key, start, count):
    return _impl.counter_bits(key, start, count)


def gaussian_fill(key, n, r, scale):
    return _impl.gaussian_fill(key, n, r, scale)


def sparse_jl_fill(key, n, r, a):
    return _impl.sparse_jl_fill(key, n, r, a)


def adam_direction(M, V, G, beta1, beta2, bc1, bc2, eps):
    return _impl.adam_direction(M, V, G, beta1, beta2, bc1, bc2, eps)
