"""Exception hierarchy.

Each error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for data problems, 4 for numeric failures.
"""


class NesyError(Exception):
    exit_code = 1


class ConfigError(NesyError, ValueError):
    exit_code = 2


class DataError(NesyError, ValueError):
    exit_code = 3


class NumericError(NesyError, ArithmeticError):
    exit_code = 4


class InvalidSpec(ConfigError):
    pass


# dataio
class MissingColumn(DataError):
    pass


class NonMonotonicTimeUnfixable(DataError):
    pass


class EmptyPhase(DataError):
    pass


class PhaseTooShort(DataError):
    pass


# features
class AllBlink(DataError):
    pass


class AllChannelsFlat(DataError):
    pass


class TooShort(DataError):
    pass


class TooFewValidSamples(DataError):
    pass


class NoChannels(DataError):
    pass


# normalize / model
class InsufficientAlertSamples(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class MissingCalibrationData(DataError):
    pass


class NonFiniteActivation(NumericError):
    pass


# train
class MissingTrace(NesyError, RuntimeError):
    pass


class SingleClassTraining(DataError):
    pass


# eval
class SingleClassSubject(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class AllZeroDifferences(DataError):
    pass


class TooFewPairs(DataError):
    pass


class UnknownSubject(DataError):
    pass


class LeakageDetected(DataError):
    """A held-out window reached training rows or a normalizer it must not touch."""


class FoldFailed(NesyError):
    """A LOSO fold raised; ``subject`` names the held-out participant."""

    def __init__(self, subject, cause):
        super().__init__(f"fold for held-out subject {subject!r} failed: {cause}")
        self.subject = subject
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
