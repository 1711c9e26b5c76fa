"""Exception taxonomy shared across the package."""


class ProtocramError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProtocramError):
    """Invalid model/experiment configuration or shape mismatch."""


class InputError(ProtocramError):
    """Caller-supplied data violates an operation's precondition."""


class NumericError(ProtocramError):
    """Non-finite values encountered where finite values are required."""


class CorruptionError(ProtocramError):
    """A persisted artifact failed its checksum or structural validation."""


class FormatVersionError(ProtocramError):
    """A persisted artifact carries an unsupported format version."""
