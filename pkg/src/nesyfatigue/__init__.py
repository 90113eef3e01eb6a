"""Neuro-symbolic fatigue classification from eye-tracking and fNIRS windows."""

__version__ = "0.1.0"

from .estimator import NeSyClassifier  # noqa: E402
from .exceptions import ConfigError, DataError, NesyError, NumericError  # noqa: E402
from .fuzzy import OperatorFamily  # noqa: E402
from .normalize import ParticipantNormalizer, Strategy  # noqa: E402

__all__ = ["NeSyClassifier", "ParticipantNormalizer", "Strategy", "OperatorFamily",
           "NesyError", "ConfigError", "DataError", "NumericError", "__version__"]
