"""Backend switch for the compiled kernels.

Set ``CALIBRA_PURE_NUMPY=1`` to force the pure-numpy code paths even when
numba is importable. Both paths consume identical random inputs and are
expected to produce identical fitted trees.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("CALIBRA_PURE_NUMPY", "").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if numba is None:
            return fn
        return numba.njit(**kwargs)(fn)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
