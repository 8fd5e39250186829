"""Optional numba acceleration.

Set ``TABSECMI_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The
flag is read once at import time; :func:`use_numba` reports the active mode.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("TABSECMI_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}


def use_numba():
    return HAVE_NUMBA and not _DISABLED


def jit(func):
    """Compile ``func`` with ``numba.njit`` when numba is importable.

    The uncompiled function stays reachable as ``.py_func`` either way so the
    fallback path can be tested against the compiled one.
    """
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    func.py_func = func
    return func
