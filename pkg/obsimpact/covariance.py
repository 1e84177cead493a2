"""Background and observation error covariance models."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import FactorizationError
from .grid_state import Grid, Variable

logger = logging.getLogger(__name__)

JITTER_LEVELS = (0.0, 1e-10, 1e-8, 1e-6)
H_STD_FLOOR = 1e-3
OBS_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class BackgroundCov:
    """Block-diagonal ``B0``: ``D C D`` on ``h`` and ``uv_std^2 I`` on ``u`` and ``v``.

    ``h_corr_chol`` is the lower Cholesky factor of the correlation matrix ``C``.
    """

    grid: Grid
    h_std: np.ndarray
    h_corr_chol: np.ndarray
    uv_std: float

    def __post_init__(self) -> None:
        cells = self.grid.cells
        if self.h_std.shape != (cells,):
            raise ValueError(f"h_std needs {cells} entries, got shape {self.h_std.shape}")
        if self.h_corr_chol.shape != (cells, cells):
            raise ValueError(f"h_corr_chol needs shape ({cells}, {cells}), got {self.h_corr_chol.shape}")
        if np.any(self.h_std < 0) or self.uv_std < 0:
            raise ValueError("standard deviations must be non-negative")

    @classmethod
    def identity(cls, grid: Grid) -> "BackgroundCov":
        return cls(grid, np.ones(grid.cells), np.eye(grid.cells), 1.0)

    def dense(self) -> np.ndarray:
        """The full ``n x n`` matrix; only sensible at desk scale."""
        cells = self.grid.cells
        matrix = np.zeros((self.grid.n, self.grid.n))
        corr = self.h_corr_chol @ self.h_corr_chol.T
        matrix[:cells, :cells] = self.h_std[:, None] * corr * self.h_std[None, :]
        uv = np.arange(cells, self.grid.n)
        matrix[uv, uv] = self.uv_std**2
        return matrix


@dataclass(frozen=True)
class ObsCov:
    """Diagonal observation error covariance."""

    variances: np.ndarray

    def __post_init__(self) -> None:
        variances = np.array(self.variances, dtype=np.float64)
        if variances.ndim != 1:
            raise ValueError("variances must be one-dimensional")
        if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
            raise ValueError("observation variances must be finite and strictly positive")
        variances.setflags(write=False)
        object.__setattr__(self, "variances", variances)

    @property
    def size(self) -> int:
        return self.variances.shape[0]

    def apply_inverse(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w, dtype=np.float64) / self.variances


def periodic_distance_squared(grid: Grid) -> np.ndarray:
    """Squared periodic distance, in cells, between every pair of cells."""
    idx = np.arange(grid.q)
    delta = np.abs(idx[:, None] - idx[None, :])
    delta = np.minimum(delta, grid.q - delta).astype(np.float64)
    di2 = (delta**2)[:, None, :, None]
    dj2 = (delta**2)[None, :, None, :]
    return (di2 + dj2).reshape(grid.cells, grid.cells)


def gaussian_correlation(grid: Grid, corr_dist_cells: float) -> np.ndarray:
    if not corr_dist_cells > 0:
        raise ValueError("corr_dist_cells must be positive")
    return np.exp(-periodic_distance_squared(grid) / (2.0 * corr_dist_cells**2))


def _jittered_cholesky(matrix: np.ndarray) -> np.ndarray:
    identity = np.eye(matrix.shape[0])
    for jitter in JITTER_LEVELS:
        try:
            factor = scipy.linalg.cholesky(matrix + jitter * identity, lower=True)
        except np.linalg.LinAlgError:
            logger.debug("Cholesky failed with jitter %.0e", jitter)
            continue
        if jitter:
            logger.info("correlation matrix factored with diagonal jitter %.0e", jitter)
        return factor
    raise FactorizationError(
        f"correlation matrix is not positive definite after jitter up to {JITTER_LEVELS[-1]:.0e}"
    )


def build_background_cov(
    grid: Grid,
    ref_state: np.ndarray,
    rel_std: float,
    corr_dist_cells: float,
    uv_std: float,
) -> BackgroundCov:
    if not rel_std > 0:
        raise ValueError("rel_std must be positive")
    if uv_std < 0:
        raise ValueError("uv_std must be non-negative")
    h_ref = np.abs(np.asarray(ref_state, dtype=np.float64)[grid.variable_slice(Variable.H)])
    floor = rel_std * h_ref.max() * H_STD_FLOOR
    h_std = np.maximum(rel_std * h_ref, floor)
    chol = _jittered_cholesky(gaussian_correlation(grid, corr_dist_cells))
    return BackgroundCov(grid=grid, h_std=h_std, h_corr_chol=chol, uv_std=float(uv_std))


def _split_blocks(B: BackgroundCov, v: np.ndarray):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != B.grid.n:
        raise ValueError(f"expected trailing dimension {B.grid.n}, got {v.shape[-1]}")
    cells = B.grid.cells
    return v, v[..., :cells], v[..., cells:]


def apply_inv_background(B: BackgroundCov, v: np.ndarray) -> np.ndarray:
    """``B0^{-1} v`` by triangular solves on the ``h`` block; accepts ``(..., n)`` input."""
    v, vh, vuv = _split_blocks(B, v)
    if np.any(B.h_std == 0) or B.uv_std == 0:
        raise FactorizationError("background covariance has a zero standard deviation")
    rhs = (vh / B.h_std).reshape(-1, B.grid.cells).T
    try:
        z = scipy.linalg.solve_triangular(B.h_corr_chol, rhs, lower=True, check_finite=False)
        z = scipy.linalg.solve_triangular(B.h_corr_chol, z, lower=True, trans="T", check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"singular correlation factor: {exc}") from exc
    out = np.empty_like(v)
    out[..., : B.grid.cells] = z.T.reshape(vh.shape) / B.h_std
    out[..., B.grid.cells :] = vuv / B.uv_std**2
    return out


def apply_background(B: BackgroundCov, v: np.ndarray) -> np.ndarray:
    """``B0 v``; the inverse of :func:`apply_inv_background`."""
    v, vh, vuv = _split_blocks(B, v)
    L = B.h_corr_chol
    scaled = vh * B.h_std
    out = np.empty_like(v)
    out[..., : B.grid.cells] = ((scaled @ L) @ L.T) * B.h_std
    out[..., B.grid.cells :] = vuv * B.uv_std**2
    return out


def sample_background_perturbation(B: BackgroundCov, seed: Optional[int]) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(B.grid.n)
    cells = B.grid.cells
    out = np.empty(B.grid.n)
    out[:cells] = B.h_std * (B.h_corr_chol @ z[:cells])
    out[cells:] = B.uv_std * z[cells:]
    return out


def build_obs_cov(
    obs_values: np.ndarray,
    noise_frac: float,
    variables: Optional[Sequence[int]] = None,
) -> ObsCov:
    """Variance ``(noise_frac * max|y|)^2`` shared by the observations of each variable.

    ``variables`` labels each observation with its :class:`Variable`; without it
    all observations form one group.
    """
    if not noise_frac > 0:
        raise ValueError("noise_frac must be positive")
    values = np.asarray(obs_values, dtype=np.float64)
    labels = np.zeros(values.shape, dtype=int) if variables is None else np.asarray(variables, dtype=int)
    if labels.shape != values.shape:
        raise ValueError("variables must align with obs_values")

    variances = np.empty_like(values)
    for label in np.unique(labels):
        members = labels == label
        variance = (noise_frac * np.abs(values[members]).max()) ** 2
        if variance <= 0:
            name = Variable(label).label if variables is not None else "all"
            warnings.warn(
                f"observations of {name} are all zero; using variance floor {OBS_VARIANCE_FLOOR:g}",
                RuntimeWarning,
                stacklevel=2,
            )
            variance = OBS_VARIANCE_FLOOR
        variances[members] = max(variance, OBS_VARIANCE_FLOOR)
    return ObsCov(variances)


__all__ = [
    "BackgroundCov",
    "ObsCov",
    "apply_background",
    "apply_inv_background",
    "build_background_cov",
    "build_obs_cov",
    "gaussian_correlation",
    "periodic_distance_squared",
    "sample_background_perturbation",
]
