"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class CsemError(Exception):
    """Base class; ``module`` tags which subsystem raised it (used by the CLI)."""

    module = "core"


class DomainError(CsemError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class SingularityError(DomainError):
    """Evaluation at a point where the kernel or function is singular."""


class ExpansionValidityError(DomainError):
    """Field point inside the region where a spherical-wave expansion diverges."""

    module = "swf"


class AccuracyError(CsemError):
    """Quadrature or truncation failed its self-convergence check."""

    module = "swf"


class ConfigError(CsemError, ValueError):
    """Invalid configuration value or combination."""

    module = "config"


class PackingError(CsemError):
    """Rejection sampling of non-intersecting scatterers ran out of attempts."""

    module = "stochastic_env"


class IllConditionedError(CsemError):
    """Method-of-moments system is numerically rank deficient."""

    module = "scatter"

    def __init__(self, message: str, condition: float, shape: tuple[int, int]):
        super().__init__(f"{message} (cond={condition:.3e}, shape={shape})")
        self.condition = condition
        self.shape = shape


class PreconditionError(CsemError, ValueError):
    module = "scatter"


class ConvergenceError(CsemError):
    """Iterative solver hit its iteration cap; ``trace`` holds the residual history."""

    module = "optim"

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)
