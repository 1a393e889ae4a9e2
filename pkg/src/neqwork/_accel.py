"""Backend selection for the hot loops.

Set ``NEQWORK_DISABLE_NUMBA=1`` to force the pure-numpy path. When numba is not
importable the numpy path is used automatically.
"""
import os

_FLAG = os.environ.get("NEQWORK_DISABLE_NUMBA", "").strip().lower()

try:
    if _FLAG in ("1", "true", "yes", "on"):
        raise ImportError
    import numba

    HAVE_NUMBA = True
    njit = numba.njit(cache=False, nogil=True)
except ImportError:
    numba = None
    HAVE_NUMBA = False

    def njit(func):
        return None


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
