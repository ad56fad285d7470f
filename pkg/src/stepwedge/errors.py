"""Exception hierarchy shared across the package."""


class StepWedgeError(Exception):
    """Base class for all package errors."""


class InvalidDesignError(StepWedgeError, ValueError):
    pass


class NonDivisibleAllocationError(InvalidDesignError):
    pass


class OutOfRangeError(StepWedgeError, IndexError):
    pass


class InvalidParameterError(StepWedgeError, ValueError):
    pass


class UnsupportedError(StepWedgeError, ValueError):
    pass


class FamilyMismatchError(StepWedgeError, ValueError):
    pass


class SingularDesignError(StepWedgeError, ValueError):
    pass


class NonConvergenceError(StepWedgeError, RuntimeError):
    pass


class DegenerateWeightError(StepWedgeError, FloatingPointError):
    pass


class SingularBreadError(StepWedgeError, ValueError):
    pass


class AdjustmentFailureError(StepWedgeError, ValueError):
    """Raised when a KC/MD residual adjustment cannot be formed for some cluster."""

    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class NotEtiError(StepWedgeError, ValueError):
    pass


class NegativeVarianceError(StepWedgeError, ValueError):
    pass


class ZeroTruthError(StepWedgeError, ZeroDivisionError):
    pass


class EmptyInputError(StepWedgeError, ValueError):
    pass


class SchemaError(StepWedgeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ColumnTypeError(StepWedgeError, TypeError):
    pass


class ConsistencyError(StepWedgeError, ValueError):
    pass


class ConfigError(StepWedgeError, ValueError):
    pass
