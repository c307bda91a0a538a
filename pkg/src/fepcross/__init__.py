"""Cross-city few-shot traffic forecasting toolkit.

Pipeline: frequency-enhanced masked pre-training on a data-rich source city,
momentum-graph fine-tuning on a few days of a target city, plus a synthetic
multi-city benchmark and evaluation utilities. All model math runs on the
in-package autodiff engine (``fepcross.numcore``) over numpy arrays.
"""

from .errors import ConfigError, DataError, DomainError, FepcrossError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "FepcrossError",
    "ShapeError",
    "__version__",
]
