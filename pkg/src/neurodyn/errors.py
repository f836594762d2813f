"""Exception hierarchy shared across the package.

Three branches map onto CLI exit codes: ConfigError (2), DataError (3),
NumericError (4).
"""


class NeurodynError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(NeurodynError):
    exit_code = 2


class DataError(NeurodynError):
    exit_code = 3


class NumericError(NeurodynError):
    exit_code = 4


# --- config ---------------------------------------------------------------

class UnknownConfigKey(ConfigError):
    pass


class InfeasibleConfig(ConfigError):
    pass


# --- data / shape ----------------------------------------------------------

class DegenerateMesh(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class StepOutOfRange(DataError):
    pass


class NonUnitInput(DataError):
    pass


class DegenerateFeatures(DataError):
    pass


class EmptyLabel(DataError):
    pass


class EmptyRegion(DataError):
    pass


class EmptyGroup(DataError):
    pass


class EmptyList(DataError):
    pass


class ZeroNorm(DataError):
    pass


class KTooLarge(DataError):
    pass


class InconsistentInput(DataError):
    pass


class TooShortSeries(DataError):
    pass


class TargetOutOfRange(DataError):
    pass


class SingleClass(DataError):
    pass


class ParseError(DataError):
    pass


class MagicMismatch(ParseError):
    pass


# --- numerics --------------------------------------------------------------

class ConvergenceFailure(NumericError):
    pass


class UnstableStep(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class SingularCovariance(NumericError):
    pass


class NegativeLoss(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteState(NumericError):
    pass
