"""Exception types shared across the library."""


class DomainError(ValueError):
    """An input violates a documented precondition or type invariant."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""
