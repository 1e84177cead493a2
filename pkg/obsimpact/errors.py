"""Exception types raised by the observation impact toolkit."""
from __future__ import annotations

from typing import Optional

import numpy as np


class ObsImpactError(RuntimeError):
    """Base class for numerical failures; ``phase`` names the stage that failed."""

    def __init__(self, message: str, *, phase: Optional[str] = None) -> None:
        super().__init__(message)
        self.phase = phase


class ModelStateError(ObsImpactError):
    """Raised when the model meets a non-finite or non-physical state."""

    def __init__(self, message: str, *, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message, phase="model")
        self.step = step


class CFLViolationError(ModelStateError):
    """Raised when the time step violates the CFL stability limit."""

    def __init__(self, cfl: float, *, step: Optional[int] = None) -> None:
        super().__init__(f"CFL number {cfl:.4g} exceeds 1", step=step)
        self.cfl = cfl


class FactorizationError(ObsImpactError):
    """Raised when a covariance factorization cannot be completed."""

    def __init__(self, message: str) -> None:
        super().__init__(message, phase="covariance")


class NegativeCurvatureError(ObsImpactError):
    """Raised by conjugate gradients when the operator is not positive definite.

    The iterate reached before the breakdown is kept on the exception so the
    caller can still inspect it.
    """

    def __init__(self, iterate: np.ndarray, iteration: int, curvature: float) -> None:
        super().__init__(
            f"non-positive curvature {curvature:.3e} at CG iteration {iteration}; "
            "the Hessian may not be positive definite at an inexact analysis",
            phase="cg",
        )
        self.iterate = iterate
        self.iteration = iteration
        self.curvature = curvature


class SizeGuardError(ObsImpactError):
    """Raised when a dense oracle is requested for a state that is too large."""

    def __init__(self, size: int, cap: int) -> None:
        super().__init__(f"dense oracle needs state size <= {cap}, got {size}", phase="oracle")
        self.size = size
        self.cap = cap


class ConfigError(ValueError):
    """Raised when an experiment configuration is invalid."""


class FieldFormatError(ValueError):
    """Raised when a field CSV cannot be parsed."""

    def __init__(self, message: str, *, row: int, column: Optional[int] = None) -> None:
        location = f"row {row}" if column is None else f"row {row}, column {column}"
        super().__init__(f"{message} at {location}")
        self.row = row
        self.column = column


__all__ = [
    "CFLViolationError",
    "ConfigError",
    "FactorizationError",
    "FieldFormatError",
    "ModelStateError",
    "NegativeCurvatureError",
    "ObsImpactError",
    "SizeGuardError",
]
