"""Backend-dispatched hot kernels (see ``atdm._backend``)."""

from __future__ import annotations

from .. import _backend
from . import _loops, _vectorized
from ._loops import F_CELL1_OUT, F_EXIT, F_INFLOW, F_R2S, F_S2R

__all__ = [
    "ctm_run",
    "solve_game",
    "best_response",
    "F_INFLOW",
    "F_R2S",
    "F_S2R",
    "F_EXIT",
    "F_CELL1_OUT",
]


def _impl():
    return _loops if _backend.get_backend() == "numba" else _vectorized


def ctm_run(*args):
    return _impl().ctm_run(*args)


def solve_game(*args):
    return _impl().solve_game(*args)


def best_response(*args):
    return _impl().best_response(*args)
