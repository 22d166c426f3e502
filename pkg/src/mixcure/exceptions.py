"""Exception and warning types raised by mixcure."""


class MixCureError(Exception):
    """Base class for all package errors."""


class ContractError(MixCureError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(MixCureError, ValueError):
    """A numeric argument lies outside the function's domain."""


class DataError(MixCureError, ValueError):
    """Input data could not be parsed or failed validation."""


class ConfigurationError(MixCureError, ValueError):
    """A run was configured in a way that cannot produce meaningful output."""


class OptimizerError(MixCureError, RuntimeError):
    """Newton iterations failed to converge.

    The last iterate is kept on ``x`` so callers can inspect or restart from it.
    """

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class CurvatureError(MixCureError, RuntimeError):
    """The negative Hessian at a terminal point is not positive definite."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class GridError(MixCureError, RuntimeError):
    """A profile fit failed at one of the hyperparameter grid points."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ChainError(MixCureError, RuntimeError):
    """The modal Gibbs chain could not make progress."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RefusalError(MixCureError, ValueError):
    """The exact oracle declines a problem that is too large to enumerate."""


class AccuracyWarning(UserWarning):
    """A numerical result may be less accurate than requested."""
