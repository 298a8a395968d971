"""Exception hierarchy shared by every module."""


class SeqDeltaError(Exception):
    """Base class for all library errors."""


class DataError(SeqDeltaError):
    """Bad input data; the CLI maps these to exit code 2."""


class ShapeMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonFiniteLoss(SeqDeltaError):
    pass


class NoCachedForward(SeqDeltaError):
    pass


class NoValidPositive(DataError):
    pass


class NoValidNegative(DataError):
    pass


class DivergedLoss(SeqDeltaError):
    pass


class EmptyIndex(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class InsufficientCandidates(DataError):
    pass


class TooFewFrames(DataError):
    pass


class CorruptFile(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    pass


class ConfigError(DataError):
    pass
