"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unusable."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
