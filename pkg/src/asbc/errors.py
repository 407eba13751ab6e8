"""Exception types raised across the package."""


class AsbcError(Exception):
    """Base class for all package errors."""


class EmptyInput(AsbcError, ValueError):
    pass


class FormatError(AsbcError, ValueError):
    pass


class InsufficientLength(AsbcError, ValueError):
    pass


class InsufficientData(AsbcError, ValueError):
    pass


class DomainError(AsbcError, ValueError):
    pass


class ShapeError(AsbcError, ValueError):
    pass


class ConfigError(AsbcError, ValueError):
    pass


class NumericalError(AsbcError, ArithmeticError):
    pass


class PriorRejectionError(AsbcError, RuntimeError):
    pass


class PipelineError(AsbcError, RuntimeError):
    pass


class ModelMismatch(AsbcError, ValueError):
    """A model bundle does not fit the requested residual spec or data."""
