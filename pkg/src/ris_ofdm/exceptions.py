"""Exception types shared across the package."""


class RisOfdmError(Exception):
    """Base class for all package errors."""


class SolverError(RisOfdmError):
    pass


class Infeasible(SolverError):
    """No strictly feasible point exists (or targets are unreachable)."""

    def __init__(self, message="problem is infeasible", binding=None):
        super().__init__(message)
        self.binding = binding


class MaxIterations(SolverError):
    pass


class NonPsdIterate(SolverError):
    """Line search could not keep a log-det argument positive definite."""


class InvalidGeometry(RisOfdmError, ValueError):
    pass


class NonDivisor(RisOfdmError, ValueError):
    pass


class DimensionMismatch(RisOfdmError, ValueError):
    pass


class LengthMismatch(RisOfdmError, ValueError):
    pass


class SingularV(RisOfdmError, ArithmeticError):
    pass


class InsufficientSamples(RisOfdmError):
    pass


class OutOfRange(RisOfdmError, ValueError):
    pass


class TableOutOfRange(OutOfRange):
    pass


class ConfigError(RisOfdmError, ValueError):
    pass
