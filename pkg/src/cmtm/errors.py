"""Exception hierarchy shared by every subpackage."""


class CMTMError(Exception):
    """Base class for all library errors."""


class DimensionError(CMTMError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(CMTMError, ValueError):
    """A hyperparameter or scene setting is out of its valid range."""


class UsageError(CMTMError, RuntimeError):
    """An API was called in a state or with arguments it does not accept."""


class NumericalError(CMTMError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class CheckpointError(CMTMError, OSError):
    """Base class for checkpoint and corpus file format problems."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    """Structurally invalid content: bad UTF-8 names, zero dims, trailing bytes."""


class LoadError(CheckpointError):
    """A well-formed checkpoint does not fit the expected architecture."""

    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = list(names)
