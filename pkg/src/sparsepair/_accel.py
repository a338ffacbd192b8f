"""Backend switch for the compiled kernels.

Set ``SPARSEPAIR_DISABLE_NUMBA=1`` to force the pure-numpy path. Without
numba installed the numpy path is used silently.
"""
import os

_DISABLED = os.environ.get("SPARSEPAIR_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it as-is."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
