"""Numba acceleration switch.

Hot numeric kernels in :mod:`splinerio.kernels` are JIT-compiled with numba
by default. Set the environment variable ``SPLINERIO_NUMBA=0`` before import
to run the identical pure-numpy code paths instead (slower, useful for
debugging and for the kernel benchmark). The flag is read once at import.
"""

import os

__all__ = ["NUMBA_ENABLED", "jit", "python_impl"]


def _flag_enabled() -> bool:
    val = os.environ.get("SPLINERIO_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
_njit = None
if _flag_enabled():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but degrade gracefully
        NUMBA_ENABLED = False


if NUMBA_ENABLED:

    def jit(fn):
        return _njit(cache=True)(fn)

else:

    def jit(fn):
        return fn


def python_impl(fn):
    """Return the pure-Python implementation behind a (possibly) jitted kernel."""
    return getattr(fn, "py_func", fn)
