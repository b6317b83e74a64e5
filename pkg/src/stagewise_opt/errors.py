"""Exception types raised across the package."""


class StagewiseError(Exception):
    """Base class for all package errors."""


class ParameterError(StagewiseError, ValueError):
    """A family, solver or schedule parameter violates its contract."""


class DimensionError(ParameterError):
    """Array shapes are inconsistent with the problem dimension."""


class DomainError(StagewiseError, ValueError):
    """A point lies outside the feasible set, or a value is outside a function's domain."""


class UnsupportedError(StagewiseError, ValueError):
    """The requested combination (family, domain, solver) is not implemented."""


class UnsupportedDomainError(UnsupportedError):
    """The solver cannot handle the problem's domain."""


class ConvexityError(ParameterError):
    """gamma * mu >= 1, so the proximal subproblem is not convex."""


class NumericError(StagewiseError, ArithmeticError):
    """Non-finite iterate or singular linear system.

    ``stage`` is filled in by the stagewise driver when the error surfaces
    from an inner solve.
    """

    def __init__(self, message, stage=None, iteration=None):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration

    def __str__(self):
        msg = super().__str__()
        ctx = []
        if self.stage is not None:
            ctx.append(f"stage {self.stage}")
        if self.iteration is not None:
            ctx.append(f"iteration {self.iteration}")
        return f"{msg} ({', '.join(ctx)})" if ctx else msg


class ToleranceNotMetError(StagewiseError, RuntimeError):
    """An iterative certification routine hit its iteration limit."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual
