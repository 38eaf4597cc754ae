"""Exception hierarchy shared by all fsmor modules."""


class FsmorError(Exception):
    """Base class for every error raised by this package."""


class ConvergenceError(FsmorError):
    """An iterative kernel hit its iteration cap."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NotPositiveDefiniteError(FsmorError):
    """Cholesky met a non-positive pivot."""

    def __init__(self, message, pivot):
        super().__init__(message)
        self.pivot = pivot


class SingularMatrixError(FsmorError):
    """A linear system could not be solved to the requested residual."""


class SymmetryError(FsmorError, ValueError):
    """A matrix expected to be symmetric is not."""


class EvaluationError(FsmorError):
    """A coefficient or data function returned unusable values."""


class StructureError(FsmorError):
    """A structural hypothesis (FS1/FS2, M1/M2, N1, ...) does not hold."""


class ConfigError(FsmorError):
    """An experiment configuration is malformed."""
