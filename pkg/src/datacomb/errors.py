"""Exception hierarchy shared by the fitting and estimation routines."""


class EstimationError(RuntimeError):
    """Base class for typed estimation failures.

    Monte Carlo and bootstrap drivers catch this class, count the failure and
    move on; anything else is treated as a bug and propagates.
    """


class ConvergenceError(EstimationError):
    pass


class SingularMatrixError(EstimationError):
    pass


class SeparationError(EstimationError):
    """Logistic coefficients diverge while the score stays away from zero."""


class WeightFloorError(EstimationError):
    """An auxiliary row has ``1 - pi`` below the inverse-weight floor."""


class FeasibilityError(EstimationError):
    """No strictly feasible ascent step for an empirical-likelihood objective."""

    def __init__(self, message, active=None):
        super().__init__(message)
        self.active = active


class SchemaError(ValueError):
    """Input data do not satisfy the two-sample layout."""
