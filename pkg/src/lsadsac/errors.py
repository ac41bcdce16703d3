"""Exception hierarchy shared across the package."""


class LsadsacError(Exception):
    pass


class ConfigurationError(LsadsacError, ValueError):
    """Shapes, names or settings that do not fit together."""


class InvalidInputError(LsadsacError, ValueError):
    pass


class UsageError(LsadsacError, RuntimeError):
    pass


class NumericError(LsadsacError, FloatingPointError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class InvalidActionError(InvalidInputError):
    pass


class SpawnError(LsadsacError, RuntimeError):
    pass


class CheckpointParseError(LsadsacError, ValueError):
    pass


class BadMagicError(CheckpointParseError):
    pass


class BadVersionError(CheckpointParseError):
    pass


class TruncatedError(CheckpointParseError):
    pass
