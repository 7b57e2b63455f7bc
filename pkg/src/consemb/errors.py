"""Exception and warning types shared across the package."""


class ConsembError(Exception):
    """Base class for package errors."""


class InvalidInputError(ConsembError, ValueError):
    pass


class ConfigurationError(ConsembError, ValueError):
    pass


class ValidationError(ConsembError, ValueError):
    pass


class PlanParseError(ConsembError, ValueError):
    pass


class DegenerateInputWarning(UserWarning):
    """Emitted when a documented convention replaces an undefined result.

    Report assembly records these as flags instead of letting them pass silently.
    """
