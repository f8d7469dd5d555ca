"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """Raised when an on-disk file does not match its declared layout."""


class TrainingDivergedError(RuntimeError):
    """Raised when the optimizer produces a non-finite loss."""

    def __init__(self, iteration: int, term: str, value: float):
        self.iteration = iteration
        self.term = term
        self.value = value
        super().__init__(
            f"non-finite loss at iteration {iteration}: term '{term}' = {value}"
        )
