"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line:
1 validation failure, 2 numeric failure, 3 I/O failure.
"""


class BodyFitError(Exception):
    exit_code = 1


class ValidationError(BodyFitError, ValueError):
    exit_code = 1


class NumericError(BodyFitError, ArithmeticError):
    exit_code = 2


class IoError(BodyFitError, OSError):
    exit_code = 3


# rotations
class DegenerateInput(ValidationError):
    pass


class InvalidRotation(ValidationError):
    pass


# shapes and dimensions
class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class TopologyMismatch(DimensionMismatch):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class InvalidDims(ValidationError):
    pass


class InvalidModel(ValidationError):
    pass


# camera / fitting
class NonPositiveScale(ValidationError):
    pass


class TooFewKeypoints(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


class Diverged(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteComponent(NumericError):
    pass


# moderator
class StaleCache(ValidationError):
    pass


# priors
class ZeroVector(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class SingularCovariance(NumericError):
    pass


class UnknownLabelClassMissing(ValidationError, KeyError):
    pass


# metrics
class DegenerateConfiguration(ValidationError):
    pass


class EmptyMesh(ValidationError):
    pass


# files
class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GradientCheckFailed(NumericError):
    pass
