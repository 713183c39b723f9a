"""Exception hierarchy shared across the package."""


class SaclabError(Exception):
    pass


class ConfigError(SaclabError, ValueError):
    """Invalid configuration value, unknown key or out-of-range hyperparameter."""


class ShapeError(SaclabError, ValueError):
    pass


class NumericError(SaclabError, ArithmeticError):
    """Raised on NaN/inf where a finite value is required."""


class UsageError(SaclabError, RuntimeError):
    pass


class FormatError(SaclabError, ValueError):
    """Corrupt, truncated or version-mismatched checkpoint file."""
