"""Highway traffic demand management through congestion-discounted EV charging.

Modules: ``ctm`` (cell transmission model), ``identification`` (fundamental
diagrams from loop detectors), ``pricing``, ``game`` (the charging game),
``scenario`` (closed-loop day, baseline, sweeps), ``synthdata`` and ``cli``.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

from ._backend import get_backend, set_backend, use_backend
from .ctm import CellParams, CtmState, StretchParams
from .errors import (AtdmError, CalibrationError, ConsistencyError, DataFormatError,
                     DomainError, GameInfeasible, GameNotConverged, IdentificationError,
                     UndefinedIndexError)
from .game import AgentParams, DecisionVector, GameConfig, solve_game
from .pricing import DemandProfile, IncentiveSchedule, PriceModel
from .scenario import ScenarioConfig, ScenarioResult, SweepSpec, performance_index

__all__ = [
    "__version__", "get_backend", "set_backend", "use_backend",
    "CellParams", "CtmState", "StretchParams",
    "AtdmError", "CalibrationError", "ConsistencyError", "DataFormatError", "DomainError",
    "GameInfeasible", "GameNotConverged", "IdentificationError", "UndefinedIndexError",
    "AgentParams", "DecisionVector", "GameConfig", "solve_game",
    "DemandProfile", "IncentiveSchedule", "PriceModel",
    "ScenarioConfig", "ScenarioResult", "SweepSpec", "performance_index",
]
