"""Exception types shared across the package."""


class DocuNetError(Exception):
    """Base class for all package errors."""


class ShapeError(DocuNetError, ValueError):
    """Operand shapes or axes are incompatible with an operation."""


class ConfigError(DocuNetError, ValueError):
    """A configuration value or combination is unsupported."""


class DataError(DocuNetError, ValueError):
    """Input data violates a runtime contract (missing mentions, capacity, ...)."""


class IngestionError(DocuNetError, ValueError):
    """A document or corpus file could not be ingested."""
