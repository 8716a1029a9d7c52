"""Exception taxonomy shared across the package.

Validation-type errors (bad shapes, bad configs, bad data) map to CLI exit
code 2; numerical failures at runtime map to exit code 1.
"""

from __future__ import annotations


class FdError(Exception):
    """Base class for all package-specific errors."""


class ModelShapeError(FdError):
    """Input arity or weight-vector length does not match the model."""


class ContractError(FdError):
    """A cross-object contract was violated (stale tape, grid mismatch)."""


class RangeError(FdError):
    """A query fell outside the supported domain beyond tolerance."""


class CoverageError(FdError):
    """A trajectory leaves the region instrumented by detectors."""


class DataError(FdError):
    """Input data is malformed or insufficient for the requested task."""


class DegenerateFitError(FdError):
    """A closed-form fit produced physically meaningless parameters."""


class ConfigError(FdError):
    """A configuration file or flag combination is invalid."""


class NumericalFailure(FdError):
    """A computation produced non-finite values.

    Carries ``step_index`` when the failure happened inside a time-stepping
    loop, so the caller can report where the state blew up.
    """

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


VALIDATION_ERRORS = (
    ModelShapeError,
    ContractError,
    RangeError,
    CoverageError,
    DataError,
    DegenerateFitError,
    ConfigError,
)
