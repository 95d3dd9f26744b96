"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, arguments, or input files (CLI exit code 1)."""


class NumericError(RuntimeError):
    """Numeric failure at runtime, e.g. a diverged training run (CLI exit code 2)."""
