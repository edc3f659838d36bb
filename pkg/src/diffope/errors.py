"""Shared exception types."""


class NumericalAbortError(RuntimeError):
    """Training diverged or sampling produced non-finite values."""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""
