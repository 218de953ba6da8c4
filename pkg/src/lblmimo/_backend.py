"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` version and a vectorised
numpy version. ``LBLMIMO_BACKEND=numpy`` forces the numpy path; the
default uses numba whenever it imports.
"""
import os

ENV_FLAG = "LBLMIMO_BACKEND"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _requested() -> str:
    value = os.environ.get(ENV_FLAG, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{ENV_FLAG} must be 'numba' or 'numpy', got {value!r}")
    return value


BACKEND = "numba" if (_requested() == "numba" and HAVE_NUMBA) else "numpy"


def use_numba() -> bool:
    return BACKEND == "numba"


def njit(func):
    """``numba.njit(cache=True, nogil=True)`` or the identity without numba."""
    if not HAVE_NUMBA:  # pragma: no cover
        return func
    return numba.njit(cache=True, nogil=True)(func)
