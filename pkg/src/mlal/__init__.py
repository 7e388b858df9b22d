"""Pool-based active learning for multi-label classification with spatial pooling heads."""

from mlal.errors import ConfigError, UnsupportedMetricError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigError", "UnsupportedMetricError", "UsageError", "__version__"]
