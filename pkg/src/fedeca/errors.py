"""Exception hierarchy shared by the library, the daemons and the CLI.

Every error carries the process exit code the CLI maps it to.
"""


class FedecaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DataError(FedecaError):
    """Invalid, inconsistent or degenerate input data."""

    exit_code = 2


class CohortValidationError(DataError):
    """A cohort row failed validation.

    Parameters
    ----------
    message : str
        Human readable description, e.g. ``"nonpositive time at row 3"``.
    row : int, optional
        1-based data row (header excluded).
    column : str, optional
        Offending column name.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConvergenceError(FedecaError):
    """An iterative solver failed to converge.

    Parameters
    ----------
    message : str
    trace : list of float, optional
        Objective values recorded before the failure.
    """

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SeparationError(ConvergenceError):
    """Propensity model hit separable or collinear covariates."""


class ProtocolError(FedecaError):
    """Malformed frame, version mismatch, timeout or corrupted round state."""

    exit_code = 4


ERROR_KINDS = {
    "DataError": DataError,
    "CohortValidationError": DataError,
    "ConvergenceError": ConvergenceError,
    "SeparationError": SeparationError,
    "ProtocolError": ProtocolError,
    "FedecaError": FedecaError,
}


def error_from_kind(kind, message):
    """Rebuild an exception sent across the wire as ``(kind, message)``."""
    return ERROR_KINDS.get(kind, FedecaError)(message)
