"""Exception types shared across the package."""


class MoefitError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(MoefitError, ValueError):
    """Array shapes do not agree with each other or with the model kind."""


class InvalidTarget(MoefitError, ValueError):
    """Targets outside the admissible set (e.g. non ±1 for logistic experts)."""


class NonFiniteInput(MoefitError, ValueError):
    """An input array contains NaN or infinite entries."""


class WrongKind(MoefitError, ValueError):
    """Operation only defined for a different family of model kinds."""


class WrongDimension(MoefitError, ValueError):
    """Operation only defined for a specific feature dimension."""


class PreconditionViolated(MoefitError, ValueError):
    """A documented precondition (e.g. a minimum norm) does not hold."""


class LengthMismatch(MoefitError, ValueError):
    """Paired sequences have different lengths."""


class ConfigError(MoefitError, ValueError):
    """Invalid configuration file or command-line arguments."""


class SingularSystem(MoefitError, RuntimeError):
    """A linear system is numerically singular even after regularisation."""


class IllConditioned(MoefitError, RuntimeError):
    """A matrix exceeds the allowed condition number."""


class AllDiverged(MoefitError, RuntimeError):
    """Every candidate step size produced a non-finite objective."""


class IterationLimit(MoefitError, RuntimeError):
    """An inner solver hit its iteration budget before reaching tolerance.

    Carries the best iterate seen so far in ``best`` and the final gradient
    norm in ``grad_norm``.
    """

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm
