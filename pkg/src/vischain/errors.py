"""Exception types shared across the package."""

from __future__ import annotations


class VischainError(Exception):
    """Base class for all package-specific errors."""


class InvalidBoxError(VischainError):
    """A box violates the normalized-coordinate contract."""


class BoxParseError(VischainError):
    """A box string could not be parsed.

    Carries the offending span so callers can report what the model
    actually emitted.
    """

    def __init__(self, message: str, span: str = ""):
        super().__init__(f"{message}: {span!r}" if span else message)
        self.span = span


class ConfigError(VischainError):
    """A config value is missing, malformed, or inconsistent."""


class ProtocolError(VischainError):
    """A conversation sequence violates the multi-turn protocol."""


class GroundingFailureError(VischainError):
    """The model's emitted RoI text could not be grounded to a box."""

    def __init__(self, message: str, span: str = "", object_index: int | None = None):
        if object_index is not None:
            message = f"{message} (object {object_index})"
        super().__init__(f"{message}: {span!r}" if span else message)
        self.span = span
        self.object_index = object_index


class TruncationError(VischainError):
    """Generation hit the sequence-length budget before emitting EOS."""


class TrainingError(VischainError):
    """Training hit a non-recoverable numeric condition."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class CheckpointError(VischainError):
    """A checkpoint is missing, malformed, or inconsistent with the config."""
