"""Numba switch for the hot kernels.

Set ``HETFOREST_DISABLE_NUMBA=1`` to run the pure numpy/Python kernels.
Both paths produce bit-identical trees; the fallback is just slower.
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("HETFOREST_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def jit(fn):
    """Compile ``fn`` with ``numba.njit`` when acceleration is enabled."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
