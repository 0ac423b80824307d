"""Numba switch.

Set ``RADCAL_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
path. The flag is read once at import time.
"""

import os

_flag = os.environ.get("RADCAL_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag in ("1", "true", "yes", "on")

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "error_model": "numpy",
}


def njit(func):
    """Compile ``func`` with the project defaults, or return it untouched."""
    if not NUMBA_AVAILABLE:
        return func
    return _numba_njit(**numba_default)(func)


def set_threads(n: int) -> None:
    """Cap numba's worker pool; ``n <= 0`` keeps the automatic default."""
    if n > 0 and NUMBA_AVAILABLE:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
