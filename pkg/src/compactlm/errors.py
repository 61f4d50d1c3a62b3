class ConfigError(ValueError):
    """Invalid configuration (exit code 1)."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss (exit code 2)."""


class CheckFailure(AssertionError):
    """An invariant or audit check failed (exit code 3)."""
