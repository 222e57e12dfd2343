"""Exception hierarchy shared by every module.

All errors raised on purpose derive from :class:`CrossviewError`, so callers
(and the CLI) can tell a validation failure apart from an unexpected crash.
"""


class CrossviewError(Exception):
    """Base class for all typed errors raised by the package."""


class DimensionError(CrossviewError, ValueError):
    pass


class ParameterError(CrossviewError, ValueError):
    pass


class DegenerateInputError(CrossviewError, ValueError):
    pass


class NormalizationError(CrossviewError, ValueError):
    pass


class ContractError(CrossviewError, ValueError):
    pass


class DegenerateGeometryError(CrossviewError, ValueError):
    pass


class CheckpointError(CrossviewError, ValueError):
    pass


class StoreError(CrossviewError):
    """Base class for on-disk data model errors."""


class FormatError(StoreError):
    pass


class CorruptionError(StoreError):
    pass


class VersionError(StoreError):
    pass


class SchemaError(StoreError):
    pass


class BadReferenceError(StoreError):
    """A manifest points at a row or file that does not exist."""


class TrainingError(CrossviewError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
