"""Exception hierarchy shared across the package."""


class SparseNasError(Exception):
    """Base class for all package errors."""


class DimensionError(SparseNasError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(SparseNasError):
    """A hyperparameter is outside its valid range."""


class ValidationError(SparseNasError):
    """Input data violates a documented precondition."""


class ContractError(SparseNasError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class LoadError(SparseNasError):
    """A dataset or file on disk does not match its declared layout."""


class SearchAbort(SparseNasError):
    """The search loop hit a non-recoverable numerical failure."""
