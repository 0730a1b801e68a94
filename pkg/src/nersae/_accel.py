"""Optional numba acceleration.

Hot kernels are written once as plain Python/numpy-scalar code and compiled
with ``numba.njit`` when numba is importable.  Setting the environment
variable ``NERSAE_DISABLE_NUMBA=1`` (read at import time) forces the
vectorised pure-numpy fallback paths instead.
"""
from __future__ import annotations

import os

import scipy.special as sc

try:  # pragma: no cover - exercised implicitly by the environment
    import numba
    from numba.extending import get_cython_function_address
except ImportError:  # pragma: no cover
    numba = None
    get_cython_function_address = None

NUMBA_AVAILABLE = numba is not None
NUMBA_DISABLED = os.environ.get("NERSAE_DISABLE_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
    "on",
}
USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


def jit(func):
    """Compile ``func`` with numba when available, else return it unchanged.

    Compilation happens whenever numba is importable, even when the fallback
    path is selected, so the benchmark can time both in one process.
    """
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def _cython_special(name, nargs):
    # Registered as a named external symbol (not a ctypes pointer) so that
    # kernels calling it stay cacheable across processes.
    import llvmlite.binding as llvm

    addr = get_cython_function_address("scipy.special.cython_special", name)
    symbol = f"nersae_sc_{name}"
    llvm.add_symbol(symbol, addr)
    sig = numba.float64(*([numba.float64] * nargs))
    return numba.types.ExternalFunction(symbol, sig)


if NUMBA_AVAILABLE:
    gammainc = _cython_special("gammainc", 2)
    gammaincc = _cython_special("gammaincc", 2)
    gammaincinv = _cython_special("gammaincinv", 2)
    gammainccinv = _cython_special("gammainccinv", 2)
    gammaln = _cython_special("gammaln", 1)
else:  # pragma: no cover
    gammainc = sc.gammainc
    gammaincc = sc.gammaincc
    gammaincinv = sc.gammaincinv
    gammainccinv = sc.gammainccinv
    gammaln = sc.gammaln


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
