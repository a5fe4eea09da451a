"""Exception types shared across the package."""


class VpcError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(VpcError):
    """A 3-D point is at or behind the camera plane (Z <= depth epsilon)."""


class MaxIterationsExceeded(VpcError):
    """Solver hit its iteration cap (normally reported via success=False)."""


class NumericalFailure(VpcError):
    """A non-finite value was produced where a finite one is required."""


class SamplingExhausted(VpcError):
    """Rejection sampling failed to find a valid start within the budget."""


class DegeneratePolygon(VpcError):
    """Feature polygon collapsed to (near) zero area.

    Carries fallback values so callers can keep the sample: ``area`` is the
    (tiny) shoelace area and ``angle`` is taken from the first edge direction.
    """

    def __init__(self, area: float, angle: float):
        super().__init__(f"feature polygon is degenerate (area={area:g} px^2)")
        self.area = area
        self.angle = angle


class FormatError(VpcError):
    """Malformed persisted file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyStore(VpcError):
    """A query was issued against a memory store with no rows."""


class IllConditioned(VpcError):
    """Kernel matrix could not be factorized even at the jitter ceiling."""


class DimensionMismatch(VpcError):
    """An input vector or matrix has the wrong dimension."""


class SchemaError(VpcError):
    """Scenario document violates the schema; ``field`` is a dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ValidationError(VpcError):
    """Scenario document is well-formed but semantically invalid."""


class IoError(VpcError):
    """Filesystem failure while emitting an artifact."""


class EmptyTrialSet(VpcError):
    """A benchmark was requested with zero trials."""
