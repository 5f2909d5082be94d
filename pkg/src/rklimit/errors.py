"""Exception hierarchy shared by all modules."""


class RKLimitError(Exception):
    """Base class for every error raised by this package."""


class DomainError(RKLimitError, ValueError):
    """An argument lies outside the mathematical domain of a formula."""


class OutOfRangeError(DomainError):
    """An energy lies outside an efficiency curve's trusted range."""


class ValidationError(RKLimitError, ValueError):
    """A data object or file breaks one of its invariants."""


class ParseError(ValidationError):
    """A data file row could not be parsed."""


class ConfigError(ValidationError):
    """A configuration value is missing or inconsistent."""
