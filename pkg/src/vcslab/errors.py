"""Exception types shared across the package."""

from __future__ import annotations


class VcsError(Exception):
    """Base class for package errors."""


class ConfigError(VcsError, ValueError):
    pass


class FormatError(VcsError):
    """Malformed binary artifact."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DivergenceError(VcsError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InvalidActionError(VcsError, ValueError):
    pass


class DegenerateReferenceError(VcsError, ZeroDivisionError):
    """Reference pair has a zero parameter gradient."""
