"""Optional numba acceleration.

Hot kernels are written once in numba-compatible numpy and wrapped with
:func:`kernel`. Setting ``NEUROPLATOON_DISABLE_NUMBA=1`` (or running without
numba installed) leaves them as plain Python functions, which gives the
pure-numpy reference path used by the benchmarks and by the equivalence tests.
"""

import os

_FLAG = "NEUROPLATOON_DISABLE_NUMBA"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False


def numba_enabled():
    return HAS_NUMBA and os.environ.get(_FLAG, "0").lower() not in ("1", "true", "yes")


USE_NUMBA = numba_enabled()


def kernel(fn):
    """Compile ``fn`` with ``numba.njit`` unless the numpy path is selected.

    The original function stays reachable as ``.py_func`` either way so both
    paths can be compared in one process.
    """
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    fn.py_func = fn
    return fn
