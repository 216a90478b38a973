"""Exception types shared across the package."""


class RobustEllipseError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RobustEllipseError, ValueError):
    """Malformed or out-of-domain input (non-finite values, empty samples, ...)."""


class DegenerateConicError(RobustEllipseError, ValueError):
    """Conic coefficients do not describe a real, non-degenerate ellipse."""


class DegenerateSampleError(RobustEllipseError, ValueError):
    """Residual sample carries no scale information (all values coincide)."""


class ConvergenceFailureError(RobustEllipseError, RuntimeError):
    """An iterative procedure hit its iteration cap before converging.

    ``last_iterate`` carries the final state so callers can inspect or
    salvage it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class InfeasibleProblemError(RobustEllipseError, RuntimeError):
    """The cone program admits no strictly feasible point.

    ``diagnostics`` holds the constraint values at the rejected starting
    point, which serves as the infeasibility certificate for this problem
    family (the slack inequalities are always satisfiable, so only the cone
    block can fail).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CoupledDegenerateError(RobustEllipseError, RuntimeError):
    """Coupled fit produced a non-positive ring gap (inner not inside outer)."""

    def __init__(self, message, eta=None):
        super().__init__(message)
        self.eta = eta
