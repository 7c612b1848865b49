"""Optional numba acceleration.

Kernels in :mod:`spgm.kernels` are written in the numba-compatible subset of
numpy. When numba is importable and ``SPGM_DISABLE_NUMBA`` is unset (or ``0``),
they are compiled with ``@njit``; otherwise the plain Python/numpy definitions
run unchanged. The flag is read once, at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

DISABLE_ENV = "SPGM_DISABLE_NUMBA"

NUMBA_REQUESTED_OFF = os.environ.get(DISABLE_ENV, "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = numba is not None and not NUMBA_REQUESTED_OFF


def optional_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is enabled, identity otherwise."""
    kwargs.setdefault("cache", True)

    def decorator(func):
        if USE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
