class NumericalError(ArithmeticError):
    """A likelihood, objective or gradient evaluated to a non-finite value."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class NumericalUnderflowWarning(RuntimeWarning):
    """An observation had (numerically) zero probability under the model."""


class UnvisitedWarning(UserWarning):
    """A state/action pair received no posterior mass."""
