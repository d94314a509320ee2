"""Numba switch for the hot kernels.

Set ``DOCSCORE_NO_NUMBA=1`` before import to run every kernel as plain
Python/numpy. Both paths execute the same source, so results agree up to
floating point evaluation order.
"""
import os

_DISABLED = os.environ.get("DOCSCORE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by DOCSCORE_NO_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def jit(func):
    """Compile ``func`` with numba (nopython, cached, GIL released) when enabled."""
    if HAVE_NUMBA:
        return _njit(cache=True, nogil=True)(func)
    return func
