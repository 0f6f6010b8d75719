"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2 and ``NumericError``
subclasses to exit code 3.
"""


class Lmk3dError(Exception):
    pass


class DataError(Lmk3dError, ValueError):
    pass


class NumericError(Lmk3dError, ArithmeticError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NonPositiveDims(DataError):
    pass


class InvalidVolume(DataError):
    pass


class DuplicateId(DataError):
    pass


class OutOfBounds(DataError):
    pass


class ParseError(DataError):
    pass


class InfeasiblePlacement(DataError):
    pass


class SingularTransform(NumericError):
    pass


class ShapeMismatch(DataError):
    pass


class DegenerateBatch(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class EmptyMask(NumericError):
    pass


class InvalidConfig(DataError):
    pass


class HookLayerMissing(DataError):
    pass


class ZeroMass(NumericError):
    pass


class IdMismatch(DataError):
    pass


class EmptySet(DataError):
    pass
