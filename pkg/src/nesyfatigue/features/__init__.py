"""Preprocessing and the 90-dimensional multimodal feature vector."""

from .complexity import hurst_rs, outlier_proportion, sample_entropy
from .extract import (
    DEFAULT_MONTAGE,
    FeatureTable,
    FeatureWindow,
    FnirsMontage,
    extract_cohort,
    extract_eyelid_features,
    extract_fnirs_features,
    extract_oculomotor_features,
    extract_pupil_features,
    extract_session_features,
    extract_window_features,
)
from .preprocess import BlinkEvent, FilteredChannels, band_power, bandpass, preprocess_fnirs, preprocess_pupil
from .schema import FEATURE_NAMES, N_EYE, N_FEATURES, N_FNIRS, SCHEMA, FeatureSchema, Group

__all__ = [
    "BlinkEvent", "DEFAULT_MONTAGE", "FEATURE_NAMES", "FeatureSchema", "FeatureTable", "FeatureWindow",
    "FilteredChannels", "FnirsMontage", "Group", "N_EYE", "N_FEATURES", "N_FNIRS", "SCHEMA",
    "band_power", "bandpass", "extract_cohort", "extract_eyelid_features", "extract_fnirs_features",
    "extract_oculomotor_features", "extract_pupil_features", "extract_session_features",
    "extract_window_features", "hurst_rs", "outlier_proportion", "preprocess_fnirs", "preprocess_pupil",
    "sample_entropy",
]
