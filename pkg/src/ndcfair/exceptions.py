"""Exceptions raised by the ndcfair modules.

All of them derive from :class:`NdcFairError`. Input and precondition
violations additionally derive from ``ValueError`` so that callers treating
bad input generically keep working.
"""


class NdcFairError(Exception):
    """Base class of the package exceptions."""


class DomainError(NdcFairError, ValueError):
    """An argument is outside the domain of the operation."""


class DataValidationError(DomainError):
    """An input file or panel violates its format or invariants.

    Attributes
    ----------
    row : int | None
        One-based line number in the source file (header is line 1), if known.
    """

    def __init__(self, description: str, row: int = None):
        super().__init__(description)
        self.description = description
        self.row = row

    def __str__(self):
        if self.row is None:
            return self.description
        return f"line {self.row}: {self.description}"


class ConvergenceError(NdcFairError):
    """An iterative estimator did not converge.

    Attributes
    ----------
    last_iterate : object
        The last parameter values reached.
    gradient_norm : float
        Euclidean norm of the objective gradient at the last iterate.
    iterations : int
        Number of iterations performed.
    """

    def __init__(
        self,
        description: str,
        last_iterate=None,
        gradient_norm: float = float("nan"),
        iterations: int = 0,
    ):
        super().__init__(description)
        self.description = description
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm
        self.iterations = iterations

    def __str__(self):
        return (
            f"{self.description} (iterations={self.iterations}, "
            f"gradient norm={self.gradient_norm:.3e})"
        )


class InfeasibleScheduleError(DomainError):
    """An exact anchor-matching recursion has no admissible solution.

    Attributes
    ----------
    bracket : int
        One-based index of the bracket or knot that fails.
    side : str
        ``"lower"`` or ``"upper"``: the feasibility bound that is violated.
    """

    def __init__(self, description: str, bracket: int, side: str):
        super().__init__(description)
        self.description = description
        self.bracket = bracket
        self.side = side

    def __str__(self):
        return f"{self.description} (bracket {self.bracket}, {self.side} bound)"


class NotchError(DomainError):
    """The benefit does not increase over an income step (benefit notch)."""
