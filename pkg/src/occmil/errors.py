"""Exception hierarchy.

The CLI maps ``DataError`` to exit code 2 and ``NumericFailure`` to exit
code 3; everything else that escapes is a bug.
"""


class MilError(Exception):
    pass


class DataError(MilError, ValueError):
    """Bad input data: malformed files, inconsistent labels, degenerate splits."""


class NumericFailure(MilError, ArithmeticError):
    pass


class DimMismatch(MilError, ValueError):
    pass


ShapeMismatch = DimMismatch


class EmptyInput(MilError, ValueError):
    pass


class EmptyBag(DataError):
    pass


class BadMagic(DataError):
    pass


class CorruptHeader(DataError):
    pass


class NonFinite(DataError):
    pass


class IoFailure(MilError, OSError):
    pass


class TooFewCases(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class InvalidConfig(DataError):
    pass


class SingleClass(DataError):
    pass


class TraceMismatch(MilError, ValueError):
    pass


class MissingInstanceProbs(MilError, ValueError):
    pass


class EmptyTrainingSet(DataError):
    pass


class BadNu(MilError, ValueError):
    pass


class BadProbability(MilError, ValueError):
    pass


class ZeroVector(MilError, ValueError):
    pass
