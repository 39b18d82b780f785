"""Exception types shared across the library.

Contract violations (bad shapes, stale handles) raise ValueError subclasses so
callers that only know stdlib exceptions still behave sensibly.
"""


class ThermosplatError(Exception):
    pass


class ContractViolation(ThermosplatError, ValueError):
    """An operation precondition was violated (shape, range, staleness)."""


class InvalidDepthError(ContractViolation):
    """Inverse depth outside the representable range."""


class BehindCameraError(ContractViolation):
    """Projection requested for a point at or behind the camera plane."""


class DegenerateConfigurationError(ContractViolation):
    """Input admits no unique solution (rank-deficient alignment, etc.)."""


class InsufficientOverlapError(ContractViolation):
    """Too few associated samples between two trajectories."""


class OracleUnavailableError(ThermosplatError, KeyError):
    """The oracle has no prediction for the requested frame pair."""


class StepFailedError(ThermosplatError, RuntimeError):
    """Damped solver step failed after the maximum number of retries."""


class TrackingFailureError(ThermosplatError, RuntimeError):
    """Frame tracking could not produce a pose."""


class FormatError(ThermosplatError, ValueError):
    """Malformed file content; message carries location information."""

    def __init__(self, message, *, path=None, line=None, offset=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class ConfigError(ThermosplatError, ValueError):
    """Unknown or invalid configuration key/value."""
