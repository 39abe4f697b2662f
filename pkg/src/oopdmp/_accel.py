"""Backend selection for the hot kernels.

Set ``OOPDMP_BACKEND=numpy`` to force the pure-numpy code paths; anything else
(or unset) uses numba when it is importable.
"""
import os

# the bundled TBB is too old for numba; skip probing it
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

BACKEND = os.environ.get("OOPDMP_BACKEND", "numba").strip().lower()
USE_NUMBA = HAVE_NUMBA and BACKEND != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n=None):
    """Apply a worker-thread count (``--threads`` or ``OOPDMP_THREADS``)."""
    if n is None:
        env = os.environ.get("OOPDMP_THREADS")
        n = int(env) if env else None
    if n is None or not HAVE_NUMBA:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
