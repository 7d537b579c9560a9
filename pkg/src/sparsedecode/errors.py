"""Exception hierarchy shared by every module in the package."""


class EngineError(Exception):
    """Base class for all errors raised by sparsedecode."""


class ShapeError(EngineError, ValueError):
    """Array dimensions do not fit the operation."""


class BudgetError(EngineError, ValueError):
    """Token budget is outside the valid range for the cache."""


class BoundsError(EngineError, IndexError):
    """A token position lies outside the cache."""


class StateError(EngineError, RuntimeError):
    """Operation is not valid for the current cache/session state."""


class ScheduleError(EngineError, ValueError):
    """Invalid layer schedule or layer ordering."""


class InputError(EngineError, ValueError):
    """Bad user-provided data (prompt, token ids, flags)."""


class FormatError(EngineError, ValueError):
    """Malformed weight or token file."""
