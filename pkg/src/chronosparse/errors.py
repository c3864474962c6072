"""Exception hierarchy.

Three families map onto the CLI exit codes: ConfigError (2), DataError (3)
and everything else derived from ChronoSparseError (4).
"""


class ChronoSparseError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ChronoSparseError, ValueError):
    pass


class DataError(ChronoSparseError, ValueError):
    pass


class ConfigInvalid(ConfigError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# core
class NonMonotonicTimestamps(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptySeries(DataError):
    pass


# ingest
class DuplicateTimestamp(DataError):
    pass


class EmptyFile(DataError):
    pass


class HeaderMissing(DataError):
    pass


class MalformedRow(DataError):
    pass


class DuplicateCell(DataError):
    pass


class EmptyRecord(DataError):
    pass


class NoRecords(DataError):
    pass


class DuplicateSourceName(DataError):
    pass


class EmptyCorpus(DataError):
    pass


# pipeline
class IndexOutOfRange(ChronoSparseError, IndexError):
    pass


class EmptyBatch(ChronoSparseError, ValueError):
    pass


class ChannelMismatch(ChronoSparseError, ValueError):
    pass


class NoSeries(DataError):
    pass


class InvalidRate(ConfigError):
    pass


class SplitTooSmall(DataError):
    pass


# metrics
class NoEvaluablePoints(ChronoSparseError, ArithmeticError):
    pass


class KindMismatch(ChronoSparseError, ValueError):
    pass


# autodiff
class ShapeError(ChronoSparseError, ValueError):
    pass


class UnknownOp(ChronoSparseError, KeyError):
    pass


class NonScalarLoss(ChronoSparseError, ValueError):
    pass


# models
class NoObservedHistory(ChronoSparseError, ValueError):
    pass


class LookbackShorterThanPeriod(ConfigError):
    pass


class EvenKernel(ConfigError):
    pass


class ParamShapeMismatch(ChronoSparseError, ValueError):
    pass


class BatchShapeMismatch(ChronoSparseError, ValueError):
    pass


# train
class EmptyTrainSet(DataError):
    pass


class CheckpointError(ChronoSparseError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CorruptPayload(CheckpointError):
    pass
