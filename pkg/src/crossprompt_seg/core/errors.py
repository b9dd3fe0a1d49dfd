"""Error codes and exception hierarchy.

All domain failures raise a ``CrossPromptError`` subclass carrying a message
and an ``ErrorCode``. The CLI maps usage-type errors to exit code 2 and
everything else to exit code 1.
"""

from enum import StrEnum
from typing import Any


class ErrorCode(StrEnum):
    """Machine-readable error categories."""

    INVALID_CONFIG = "invalid_config"
    INVALID_INPUT = "invalid_input"
    NO_FOREGROUND = "no_foreground"
    SHAPE_MISMATCH = "shape_mismatch"
    NON_FINITE_LOSS = "non_finite_loss"
    NOT_FOUND = "not_found"
    MANIFEST_INVALID = "manifest_invalid"
    GROUND_TRUTH_REQUIRED = "ground_truth_required"
    CHECKPOINT_IO = "checkpoint_io"


class CrossPromptError(Exception):
    """Base class for all crossprompt-seg errors.

    Attributes:
        message: Human-readable description.
        error_code: Category used for exit-code mapping and log filtering.
    """

    default_code: ErrorCode = ErrorCode.INVALID_INPUT

    def __init__(self, message: str, error_code: ErrorCode | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.error_code = error_code or self.default_code


class ConfigError(CrossPromptError):
    """Raised when a run configuration fails validation."""

    default_code = ErrorCode.INVALID_CONFIG

    def __init__(self, message: str, field: str | None = None) -> None:
        super().__init__(message)
        self.field = field


class InvalidInputError(CrossPromptError):
    """Raised when an operation receives an input outside its contract."""

    default_code = ErrorCode.INVALID_INPUT


class NoForegroundError(CrossPromptError):
    """Raised when a point is requested from an empty component."""

    default_code = ErrorCode.NO_FOREGROUND

    def __init__(self, message: str = "no foreground") -> None:
        super().__init__(message)


class ShapeMismatchError(CrossPromptError):
    """Raised when paired arrays do not share a shape."""

    default_code = ErrorCode.SHAPE_MISMATCH


class NonFiniteLossError(CrossPromptError):
    """Raised when a loss term is NaN or infinite; training aborts.

    Attributes:
        diagnostics: Loss breakdown and step context at the time of failure.
    """

    default_code = ErrorCode.NON_FINITE_LOSS

    def __init__(self, message: str = "non-finite loss", diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ManifestError(CrossPromptError):
    """Raised when a dataset manifest violates its schema or invariants.

    Attributes:
        offending_entries: Entry ids (or field paths) responsible for the failure.
    """

    default_code = ErrorCode.MANIFEST_INVALID

    def __init__(self, message: str, offending_entries: list[str] | None = None) -> None:
        super().__init__(message)
        self.offending_entries = offending_entries or []


class NotFoundError(CrossPromptError):
    """Raised when a referenced file or record does not exist."""

    default_code = ErrorCode.NOT_FOUND


class GroundTruthRequiredError(CrossPromptError):
    """Raised when a ground-truth-prompted operation meets unlabeled data."""

    default_code = ErrorCode.GROUND_TRUTH_REQUIRED

    def __init__(self, message: str = "ground truth required") -> None:
        super().__init__(message)


class CheckpointError(CrossPromptError):
    """Raised when a checkpoint cannot be written or read."""

    default_code = ErrorCode.CHECKPOINT_IO


USAGE_ERROR_CODES: frozenset[ErrorCode] = frozenset(
    {
        ErrorCode.INVALID_CONFIG,
        ErrorCode.NOT_FOUND,
        ErrorCode.MANIFEST_INVALID,
        ErrorCode.GROUND_TRUTH_REQUIRED,
    }
)
