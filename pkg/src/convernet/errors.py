"""Exception types shared across the package."""


class ConverNetError(Exception):
    pass


class ShapeError(ConverNetError, ValueError):
    pass


class NumericError(ConverNetError, ArithmeticError):
    pass


class TapeError(ConverNetError, RuntimeError):
    pass


class ConfigError(ConverNetError, ValueError):
    pass


class DataError(ConverNetError, ValueError):
    pass


class VocabularyError(DataError):
    pass


class MetricError(ConverNetError, ValueError):
    """Metric undefined for the given predictions (e.g. a single class)."""


class PairingError(ConverNetError, ValueError):
    pass


class CheckpointError(ConverNetError, IOError):
    pass


class CorruptionError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass
