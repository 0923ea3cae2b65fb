"""Exception hierarchy.

The CLI maps ``DataError`` subclasses to exit code 2 and ``NumericalError``
subclasses to exit code 3.
"""


class CeclError(Exception):
    pass


class DataError(CeclError):
    pass


class NumericalError(CeclError):
    pass


class FillerViolation(CeclError):
    """A mask filler returned the masked word or a word of the wrong class."""


class EmptyCaption(DataError):
    pass


class UnknownToken(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class BadRecord(DataError):
    pass


class EmptyBenchmark(DataError):
    pass


class EmptySamples(DataError):
    pass


class KTooLarge(DataError):
    pass


class ZeroNorm(NumericalError):
    pass


class NonFinite(NumericalError):
    pass
