"""Exception hierarchy for the BVS pipeline."""

from typing import Any


class BVSError(Exception):
    """Base exception for every error raised by the pipeline."""

    kind = "runtime"
    exit_code = 1

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        self.message = message
        self.details = details
        super().__init__(f"BVS {self.kind} error: {message}")


class RangeError(BVSError):
    """A token id lies outside its vocabulary."""

    kind = "range"


class NonImageCodeError(RangeError):
    """An acoustic grid recombines to an id outside the semantic vocabulary."""

    kind = "non-image code"

    def __init__(self, position: int, code: int, limit: int) -> None:
        self.position = position
        self.code = code
        super().__init__(
            f"position {position} recombines to {code} >= {limit}",
            {"position": position, "code": code, "limit": limit},
        )


class ShapeError(BVSError):
    """Lengths or tensor shapes disagree."""

    kind = "shape"


class ConfigError(BVSError):
    """A configuration is invalid or does not match a persisted artifact."""

    kind = "config"


class ConditionError(BVSError):
    """A required conditioning input is missing."""

    kind = "condition"


class NumericError(BVSError):
    """NaN or infinite values where finite values are required."""

    kind = "numeric"


class DomainError(BVSError):
    """An argument lies outside the domain of a function."""

    kind = "domain"


class IntegrityError(BVSError):
    """A persisted file is truncated or fails its checksum."""

    kind = "integrity"


class InputError(BVSError):
    """User-supplied inputs are inconsistent or unknown."""

    kind = "input"


class UsageError(BVSError):
    """A command was invoked with invalid arguments."""

    kind = "usage"
    exit_code = 2
