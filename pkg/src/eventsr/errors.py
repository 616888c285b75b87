"""Exception hierarchy shared across the package.

CLI exit-code mapping: usage errors -> 1, DataError -> 2, NumericalError -> 3.
"""


class EventSRError(Exception):
    """Base class for package errors."""


class UsageError(EventSRError):
    """Bad command-line arguments or unknown configuration keys."""


class DataError(EventSRError):
    """Missing, malformed, or inconsistent input data."""


class InsufficientEventsError(DataError):
    """A stacking request needs more events than the stream provides."""

    def __init__(self, shortfall: int, message: str | None = None):
        self.shortfall = int(shortfall)
        super().__init__(message or f"insufficient events: {self.shortfall} more required")


class NumericalError(EventSRError):
    """Non-finite values encountered during optimization."""

    def __init__(self, message: str, snapshot: dict | None = None):
        self.snapshot = snapshot or {}
        super().__init__(message)
