"""Exception taxonomy shared across the package."""


class FusettaError(Exception):
    """Base class for all package errors."""


class ShapeError(FusettaError, ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ParameterError(FusettaError, ValueError):
    """A scalar argument (scale, eps, k, severity, ...) is out of range."""


class DegenerateModalityError(ParameterError):
    """A modality has fewer than one token."""


class ContractError(FusettaError, RuntimeError):
    """A call violates an API contract (non-scalar backward, empty stream, ...)."""


class NumericError(FusettaError, RuntimeError):
    """A numeric quantity is non-finite or otherwise invalid."""


class OracleError(NumericError):
    """The finite-difference oracle hit a non-finite loss evaluation."""
