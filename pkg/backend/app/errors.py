from typing import Iterable, Optional


class LiouvilleError(Exception):
    """Base class for every failure the library reports to its callers."""

    exit_code = 1


class InvalidInputError(LiouvilleError, ValueError):
    exit_code = 2


class ThresholdError(InvalidInputError):
    """Efficiency at or below 1/2: the inverse loss series diverges."""


class ConfigError(LiouvilleError):
    exit_code = 2


class IncompleteDataError(LiouvilleError):
    exit_code = 3

    def __init__(self, message: str, missing: Iterable[int] = ()):
        self.missing = sorted(set(int(n) for n in missing))
        if self.missing:
            message = f"{message} (missing outcomes: {self.missing})"
        super().__init__(message)


class NumericalError(LiouvilleError):
    exit_code = 4


class BranchFailureError(NumericalError):
    """The principal matrix logarithm does not exist for the given matrix."""


class IntegrationError(NumericalError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
            message = f"{message} [{details}]"
        super().__init__(message)


class InternalError(LiouvilleError):
    pass
