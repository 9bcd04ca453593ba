"""Numba switch.

Set ``DCCOORD_DISABLE_JIT=1`` to run the pure-numpy kernels instead of the
compiled ones.  The flag is read once at import time.
"""

import os

JIT_DISABLED = os.environ.get("DCCOORD_DISABLE_JIT", "").strip() not in ("", "0", "false", "False")

try:
    if JIT_DISABLED:
        raise ImportError("jit disabled by environment")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised through the env flag
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


USE_JIT = HAVE_NUMBA and not JIT_DISABLED
