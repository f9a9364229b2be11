"""Exception types raised across the package."""


class ModelValidationError(ValueError):
    """A model or density violates its structural invariants."""


class SimulationDivergedError(FloatingPointError):
    """State propagation produced a non-finite value."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class ConditioningError(ArithmeticError):
    """A matrix that must be positive definite could not be factorized."""


class DegenerateGeometryError(ValueError):
    """Bearing requested between coincident points."""


class EstimateFailedError(RuntimeError):
    """The horizon solver did not converge.

    Carries the best iterate found and the solver diagnostics so callers can
    decide whether to salvage the estimate.
    """

    def __init__(self, message, best=None, report=None, step=None):
        super().__init__(message)
        self.best = best
        self.report = report
        self.step = step


class AssumptionViolatedError(ArithmeticError):
    """The objective Hessian at the solution is singular."""


class PreconditionError(ValueError):
    """An analysis was requested on an input that does not satisfy its preconditions."""
