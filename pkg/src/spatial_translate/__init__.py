"""Spatial speech translation DSP: angular-search separation, binaural re-rendering,
simultaneous-policy simulation and evaluation."""
from .audio import SAMPLE_RATE, fractional_delay, stft, istft, xcorr_lag, wav_read, wav_write
from .errors import ConfigError, DataError, SpatialTranslateError

__version__ = "0.1.0"

__all__ = [
    "SAMPLE_RATE",
    "ConfigError",
    "DataError",
    "SpatialTranslateError",
    "fractional_delay",
    "istft",
    "stft",
    "wav_read",
    "wav_write",
    "xcorr_lag",
]
