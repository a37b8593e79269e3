"""Classifier-based detection, strength estimation and interpretation of a signal in unlabeled data."""
from .errors import ConfigError, DataError, NumericalError, SigsleuthError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "SigsleuthError", "__version__"]
