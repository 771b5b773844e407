"""Kernel backend selection.

The hot loops (CTM rollouts and the best-response sweeps of the charging
game) exist twice: as loop-style kernels compiled with numba, and as a
pure-numpy path. The numba path is used when numba imports and the
environment does not opt out:

    ATDM_BACKEND=numpy   force the pure-numpy kernels
    ATDM_BACKEND=numba   use numba (the default; falls back if unavailable)
"""

from __future__ import annotations

import contextlib
import os

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("ATDM_BACKEND", "numba").strip().lower()
    if name not in _VALID:
        raise ValueError(f"ATDM_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return name


_current = _initial_backend()


def get_backend() -> str:
    return _current


def set_backend(name: str) -> None:
    global _current
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    _current = name


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend (used by tests and benchmarks)."""
    previous = _current
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if NUMBA_AVAILABLE:
        import numba

        return numba.njit(*args, **kwargs)

    def wrapper(f):
        return f

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrapper
