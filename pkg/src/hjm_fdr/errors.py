"""Exception hierarchy shared by all modules."""


class HjmError(Exception):
    """Base class for every error raised by this package."""


class DomainError(HjmError, ValueError):
    """An argument lies outside the domain of an operation (e.g. x > x_max)."""


class GridMismatchError(HjmError, ValueError):
    """Two curves combined in one operation live on different grids."""


class RegionError(HjmError):
    """A state left the model's working region.

    Attributes
    ----------
    index : int or None
        Index of the violated functional bound.
    value : float or None
        Value of the functional at the offending state.
    bound : float or None
        The lower bound that was violated.
    time : float or None
        Simulation or flow time of the exit, when known.
    """

    def __init__(self, message, index=None, value=None, bound=None, time=None):
        super().__init__(message)
        self.index = index
        self.value = value
        self.bound = bound
        self.time = time


class StructureError(HjmError):
    """The model does not have the structure an operation requires."""


class ConstructionError(HjmError):
    """A linear functional could not be built from its constraints."""

    def __init__(self, message, dependent_constraint=None):
        super().__init__(message)
        self.dependent_constraint = dependent_constraint


class SolverError(HjmError, ArithmeticError):
    """Numerical failure: ODE blow-up, non-convergence, NaN."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class PreconditionError(HjmError):
    """A documented precondition does not hold (carries the measured distance)."""

    def __init__(self, message, distance=None):
        super().__init__(message)
        self.distance = distance


class ConfigError(HjmError):
    """Invalid run configuration or model specification text."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
