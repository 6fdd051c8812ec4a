"""Exception types shared across the package.

The CLI maps these onto exit codes (see ``qsrlab.cli``).
"""


class ParameterError(ValueError):
    """Invalid hyperparameter or configuration value."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class StepRangeError(IndexError):
    """Step index outside ``[0, total_steps)``."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class NumericError(ArithmeticError):
    """Non-finite value encountered during a run.

    ``step`` is the global step index at which it was detected, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrationError(ArithmeticError):
    """Slow SDE integration failed; ``time`` is the continuous time stamp."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time
