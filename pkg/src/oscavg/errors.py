"""Fault types shared across the package.

Each fault carries the process exit code the command line layer maps it to.
Plain ``ValueError`` is reserved for caller mistakes (bad indices, wrong
call order) and is not translated into an exit code.
"""


class ValidationFault(ValueError):
    """Configuration or family parameters fail validation (exit code 2)."""

    exit_code = 2


class HorizonExhaustedFault(RuntimeError):
    """A cutoff search ran past its horizon (exit code 3)."""

    exit_code = 3

    def __init__(self, message, level, horizon, best_average=None):
        super().__init__(message)
        self.level = int(level)
        self.horizon = int(horizon)
        self.best_average = None if best_average is None else float(best_average)


class NumericalFault(RuntimeError):
    """Numerical breakdown the caller must see, never silently repaired (exit code 4)."""

    exit_code = 4


class NonPsdFault(NumericalFault):
    """A correlation window admits no positive factorization even after jitter."""

    def __init__(self, message, minor, pivot):
        super().__init__(message)
        self.minor = int(minor)
        self.pivot = float(pivot)
