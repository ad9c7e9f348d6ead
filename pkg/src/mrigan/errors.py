"""Exception hierarchy.

Every error raised by the package derives from :class:`MriganError`.  The two
intermediate classes decide the CLI exit code: :class:`DataError` maps to 2,
:class:`VerificationError` to 3.
"""


class MriganError(Exception):
    pass


class DataError(MriganError, ValueError):
    """Bad input data: malformed files, wrong shapes, out-of-range values."""


class VerificationError(MriganError):
    pass


# nifti-io
class NiftiError(DataError):
    pass


class BadMagic(NiftiError):
    pass


class BadDims(NiftiError):
    pass


class BadHeaderSize(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class UnsupportedFormat(NiftiError):
    pass


class Truncated(NiftiError):
    pass


class Unsupported4D(NiftiError):
    pass


class OutOfBounds(NiftiError, IndexError):
    pass


# slice-pipeline
class TooThin(DataError):
    pass


class EvenCount(DataError):
    pass


class TooLarge(DataError):
    pass


class TooSmall(DataError):
    pass


class ContentLoss(DataError):
    pass


class RangeViolation(DataError):
    pass


class ShapeMismatch(DataError):
    pass


# tensor-core
class OddExtent(ShapeMismatch):
    pass


class BatchTooSmall(DataError):
    pass


class BadRate(MriganError, ValueError):
    pass


# dcgan-model / train-harness
class BadSchedule(MriganError, ValueError):
    pass


class DatasetEmpty(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class ConfigMismatch(DataError):
    pass


class ConfigError(MriganError, ValueError):
    """Invalid run configuration (a usage error, not a data error)."""
