"""Exception hierarchy.

Everything raised on purpose derives from :class:`AffectError`. Subclasses of
:class:`ValidationError` signal bad input (the CLI maps them to exit code 2);
the rest are runtime failures.
"""


class AffectError(Exception):
    pass


class ValidationError(AffectError, ValueError):
    pass


# tensor core
class ShapeMismatch(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class NonScalarLoss(ValidationError):
    pass


class DoubleBackward(AffectError, RuntimeError):
    pass


class EmptyTape(AffectError, RuntimeError):
    pass


# model / metrics
class LengthMismatch(ValidationError):
    pass


class CheckpointMismatch(ValidationError):
    pass


# data pipeline
class MalformedRow(ValidationError):
    pass


class EmptyTrial(ValidationError):
    pass


class EmptyFeature(ValidationError):
    pass


class OverlappingSpans(ValidationError):
    pass


class BinaryFormatError(ValidationError):
    pass


class BadMagic(BinaryFormatError):
    pass


class TruncatedFile(BinaryFormatError):
    pass


class DimOverflow(BinaryFormatError):
    pass


# folds and fusion
class SubjectSplitImpossible(ValidationError):
    pass


class DegenerateRaters(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


# harness
class EmptyFold(ValidationError):
    pass
