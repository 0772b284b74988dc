"""Exception hierarchy. The CLI maps these onto exit codes."""


class ShrinkMVNError(Exception):
    """Base class for package errors."""


class DataError(ShrinkMVNError, ValueError):
    """Malformed or unusable input data."""


class NumericError(ShrinkMVNError, ArithmeticError):
    """Numerical breakdown (non-PD matrix, failed root find, ...)."""


class InfeasibleError(ShrinkMVNError, ValueError):
    """An optimization problem has an empty feasible set."""
