"""Exception hierarchy shared across the package."""


class MRLError(Exception):
    """Base class for all package errors."""


class ShapeError(MRLError, ValueError):
    pass


class NonFiniteError(MRLError, ValueError):
    pass


class MissingGradError(MRLError, RuntimeError):
    pass


class FormatError(MRLError, ValueError):
    """A binary file could not be decoded."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class ShapeIncompatibleError(FormatError):
    """A checkpoint tensor does not fit the requested model configuration."""


class ConfigError(MRLError, ValueError):
    pass


class DataError(MRLError, ValueError):
    pass
