"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NumericalFailure(RuntimeError):
    """Non-finite parameters or a diverging run.

    ``state`` holds whatever the failing stage could save (typically the
    last finite alignment snapshot).
    """

    def __init__(self, message: str, state=None):
        self.state = state
        super().__init__(message)


class AcceptanceFailure(RuntimeError):
    """A run finished but failed its pass/fail check."""
