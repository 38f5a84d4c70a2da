"""Exception hierarchy shared by every module."""


class PathflowError(Exception):
    """Base class for library errors."""


class ConfigurationError(PathflowError, ValueError):
    """Invalid experiment or manifold configuration."""


class DomainError(PathflowError, ValueError):
    """A point lies outside the tubular neighbourhood of the manifold."""


class IntegrationError(PathflowError, RuntimeError):
    """A path integrator failed at a given grid step."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SolverError(PathflowError, RuntimeError):
    """An iterative solver did not converge or violated an invariant."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractError(PathflowError, ValueError):
    """An input violates a documented precondition."""


class AnticipativeShiftError(ContractError):
    """Raised when a shift that looks into the future is passed to the flow."""


class UnsupportedShapeError(ContractError):
    """The requested route does not support this process shape."""
