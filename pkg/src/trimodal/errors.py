"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """Input data is missing a field the operation needs."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class DependencyError(RuntimeError):
    """A command needs an artifact that has not been produced yet."""
