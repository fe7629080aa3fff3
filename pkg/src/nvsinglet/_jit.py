"""Numba switch.

Set ``NVSINGLET_NUMBA=0`` to run every kernel on the pure-numpy path. The
flag is read once at import time.
"""

import os

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("NVSINGLET_NUMBA", "1").lower() not in ("0", "false", "no", "off")

JIT_OPTIONS = {"nogil": True, "cache": True}


def njit(func):
    """Compile ``func`` in nopython mode if numba is available, else return it untouched."""
    if not HAVE_NUMBA:
        return func
    return nb.njit(**JIT_OPTIONS)(func)
