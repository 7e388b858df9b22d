"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid shapes, hyperparameters or experiment settings."""


class UsageError(RuntimeError):
    """An operation was called in a state where it cannot run."""


class UnsupportedMetricError(ValueError):
    """A query metric needs information the prediction does not carry."""
