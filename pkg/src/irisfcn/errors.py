"""Exception hierarchy shared by every stage of the pipeline."""


class IrisFcnError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class DimensionError(IrisFcnError, ValueError):
    exit_code = 2


class ValidationError(IrisFcnError, ValueError):
    exit_code = 2


class FormatError(IrisFcnError, ValueError):
    """Malformed or unrecognised artifact file."""

    exit_code = 2


class TrainingError(IrisFcnError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NoIrisFound(IrisFcnError):
    pass


class NoCircleFound(IrisFcnError):
    pass


class GeometryError(IrisFcnError):
    pass


class IncomparableCodes(IrisFcnError):
    """Two iris codes share no jointly valid bit."""
