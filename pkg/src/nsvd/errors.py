"""Exception classes shared across the toolkit."""


class NsvdError(Exception):
    """Base class for all toolkit errors."""


class ArgumentError(NsvdError, ValueError):
    """Invalid argument (bad rank, dimension mismatch, out-of-range ratio)."""


class DecompositionError(NsvdError):
    """A decomposition kernel failed to converge."""


class PositiveDefinitenessError(DecompositionError):
    """Cholesky failed; carries the index of the first failing pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix not positive definite at pivot {pivot}")


class DegenerateActivationError(NsvdError):
    """All activation Gram eigenvalues fell below the pseudo-inverse cutoff."""


class InfeasibleBudgetError(ArgumentError):
    """The requested compression ratio leaves no rank budget."""


class FormatError(NsvdError):
    """Malformed container file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
