"""Exception types shared across the package."""


class SimError(Exception):
    """Base class for all package errors."""


class ConfigError(SimError):
    """Inputs are inconsistent with each other (unknown degree, empty plan, ...)."""


class DomainError(SimError, ValueError):
    """An argument lies outside the domain of the operation."""


class ParseError(SimError):
    """A file failed to parse or validate.

    ``location`` is a human-readable anchor such as ``line 3`` or
    ``prefill.4.segments[1]``.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)
