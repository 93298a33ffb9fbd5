"""Exception types raised across the package.

``ConfigError`` covers bad parameters and configuration files (CLI exit
code 2); every other ``DataError`` is about the audio / manifests being
processed (CLI exit code 3).
"""


class SpatialTranslateError(Exception):
    pass


class ConfigError(SpatialTranslateError, ValueError):
    pass


class DataError(SpatialTranslateError, ValueError):
    pass


# audio-core
class SignalTooShort(DataError):
    pass


class DelayOutOfRange(DataError):
    pass


class UndefinedCorrelation(DataError):
    pass


class UnsupportedRate(DataError):
    pass


class UnsupportedLayout(DataError):
    pass


# scene-synth
class MissingAsset(DataError):
    pass


class InvalidSpec(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class InvalidTrajectory(DataError):
    pass


# spatial-render / metrics
class SilentStem(DataError):
    pass


class MissingHrtf(DataError):
    pass


class InvalidReference(DataError):
    pass


# simul-policy
class UndefinedLatency(DataError):
    pass
