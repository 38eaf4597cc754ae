"""Parametrized Friedrichs' systems: upwind DG solves, structural checks and N-width studies."""
from importlib.metadata import PackageNotFoundError, version

from .errors import (
    ConfigError,
    ConvergenceError,
    EvaluationError,
    FsmorError,
    NotPositiveDefiniteError,
    SingularMatrixError,
    StructureError,
    SymmetryError,
)
from .system import FriedrichsSystem, classify_system, registry_get, registry_ids, validate_friedrichs

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConvergenceError", "EvaluationError", "FsmorError", "NotPositiveDefiniteError",
    "SingularMatrixError", "StructureError", "SymmetryError", "FriedrichsSystem", "classify_system",
    "registry_get", "registry_ids", "validate_friedrichs", "__version__",
]
