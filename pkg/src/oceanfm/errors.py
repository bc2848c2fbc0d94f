"""Exception hierarchy shared across the pipeline."""


class OceanFMError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(OceanFMError, ValueError):
    pass


class ConfigurationError(OceanFMError, ValueError):
    pass


class GeometryError(OceanFMError, ValueError):
    pass


class DivergenceError(OceanFMError, RuntimeError):
    pass


class DeterminismError(OceanFMError, RuntimeError):
    pass


class DomainError(OceanFMError, ValueError):
    pass


class EmptyLossError(OceanFMError, ValueError):
    """Raised when a masked loss has no contributing pixels."""


class ValidationError(OceanFMError, ValueError):
    pass


class FormatError(OceanFMError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyWindowError(OceanFMError, ValueError):
    pass


class InsufficientDataError(OceanFMError, ValueError):
    pass
