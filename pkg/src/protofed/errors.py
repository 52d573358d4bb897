"""Exception hierarchy shared across the package."""


class ProtoFedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProtoFedError):
    """Invalid shapes, extents, or configuration values."""


class DataError(ProtoFedError):
    """Invalid dataset contents (labels out of range, empty classes, ...)."""


class ProtocolError(ProtoFedError):
    """Corrupted or incompatible payloads / checkpoints."""


class FormatError(ProtoFedError):
    """Malformed external file (PNM, manifest)."""


class NumericError(ProtoFedError):
    """Non-finite values encountered where finite ones are required."""
