"""Exception hierarchy.

``ValidationError`` subclasses describe bad inputs (files, flags, configs);
``RuntimeFailure`` subclasses describe failures during a computation.  The
CLI maps the two families to exit codes 1 and 2.
"""


class RRWaveError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RRWaveError, ValueError):
    pass


class RuntimeFailure(RRWaveError, RuntimeError):
    pass


# signal_io
class MissingFile(ValidationError, FileNotFoundError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{path}:{line}: {reason}")


class NonMonotonicTimestamps(ValidationError):
    pass


class EmptySignal(ValidationError):
    pass


class WindowLongerThanSignal(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


# sqi / eval
class EmptyWindow(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class Empty(ValidationError):
    pass


class TooFewSubjects(ValidationError):
    pass


class InvalidRubric(ValidationError):
    pass


# tensor engine / model
class ShapeMismatch(ValidationError):
    pass


class DisconnectedGraph(RuntimeFailure):
    pass


class NonFiniteActivation(RuntimeFailure):
    pass


class InvalidConfig(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class VersionUnsupported(ValidationError):
    pass


class ChecksumMismatch(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


# train
class EmptySplit(ValidationError):
    pass


class NonFiniteLoss(RuntimeFailure):
    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


# cli
class UnknownSubcommand(ValidationError):
    pass


class ConflictingFlags(ValidationError):
    pass
