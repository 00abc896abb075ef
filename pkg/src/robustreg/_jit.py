"""Numba switch.

Set ``ROBUSTREG_DISABLE_NUMBA=1`` before import to run every kernel as plain
Python/numpy. Compiled dispatchers keep the original function on ``py_func``;
``python_impl`` returns it either way so tests can compare both paths.
"""

import os

DISABLED = os.environ.get("ROBUSTREG_DISABLE_NUMBA", "").strip() not in ("", "0", "false")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    _njit = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def python_impl(fn):
    return getattr(fn, "py_func", fn)
