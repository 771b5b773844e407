"""Exception hierarchy. The CLI maps these onto exit codes."""


class AtdmError(Exception):
    pass


class DomainError(AtdmError, ValueError):
    """An argument lies outside the domain of a model function."""


class ConsistencyError(AtdmError, RuntimeError):
    """A simulation produced a state that violates a model invariant."""


class DataFormatError(AtdmError, ValueError):
    """Input data is malformed (missing columns, unsorted timestamps, ...)."""


class IdentificationError(AtdmError):
    def __init__(self, message: str, cell: int | None = None):
        self.cell = cell
        prefix = f"cell {cell}: " if cell is not None else ""
        super().__init__(prefix + message)


class CalibrationError(AtdmError, ValueError):
    pass


class GameInfeasible(AtdmError):
    pass


class GameNotConverged(AtdmError):
    def __init__(self, message: str, solution=None, interval: int | None = None):
        self.solution = solution
        self.interval = interval
        super().__init__(message)


class UndefinedIndexError(AtdmError, ZeroDivisionError):
    """Performance index requested against a baseline without congestion."""
