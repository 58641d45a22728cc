"""Exception types raised across the package."""


class AttnIndexError(Exception):
    """Base class for all package errors."""


class ValidationError(AttnIndexError, ValueError):
    """A configuration or argument failed validation.

    The offending field name is kept on ``field`` so callers (the CLI in
    particular) can report it in machine-readable form.
    """

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(AttnIndexError, ValueError):
    """A binary file (KVD1 or OODG) is malformed."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyContextError(AttnIndexError, ValueError):
    """Attention or search was requested over an empty key set."""
