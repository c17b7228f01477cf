"""Numba shim.

Set ``COVIDNET_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba is
missing the numpy path is used automatically.
"""
import os

_DISABLED = os.environ.get("COVIDNET_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not _DISABLED

kwd = {"cache": True, "nogil": True}


def njit(func):
    """``numba.njit`` when available, otherwise return ``func`` untouched."""
    if not HAVE_NUMBA:  # pragma: no cover
        return func
    return nb.njit(**kwd)(func)
