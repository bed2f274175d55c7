"""Optional numba acceleration.

Set ``MCML_NUMBA=0`` in the environment to run every kernel through its
pure-Python/numpy path. The flag is read once, at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("MCML_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def jit(func):
    """``numba.njit(cache=True)`` when enabled, otherwise the function itself.

    The undecorated function stays reachable as ``.py_func`` either way so
    tests can compare the two paths.
    """
    if not NUMBA_ENABLED:
        func.py_func = func
        return func
    return numba.njit(cache=True, error_model="numpy")(func)
