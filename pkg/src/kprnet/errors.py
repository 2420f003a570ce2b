"""Exception types shared across the package."""


class KprnetError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(KprnetError, ValueError):
    """A byte payload does not follow the expected on-disk layout."""


class DataError(KprnetError, ValueError):
    """A payload parsed correctly but carries invalid values."""


class StateError(KprnetError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class ConfigError(KprnetError, ValueError):
    """A configuration value violates its invariants."""
