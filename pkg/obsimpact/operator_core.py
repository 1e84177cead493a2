"""Matrix-free linear algebra: conjugate gradients, Lanczos, orthonormalization and dense factorizations."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed

from .errors import NegativeCurvatureError, ObsImpactError

logger = logging.getLogger(__name__)

NORM_POWER_ITERATIONS = 20
QR_DROP_RTOL = 1e-12

RowsFunction = Callable[[np.ndarray], np.ndarray]


def map_rows(func: RowsFunction, rows: np.ndarray, n_jobs: int = 1) -> np.ndarray:
    """Apply ``func`` to a ``(k, n)`` block of row vectors, split into ``n_jobs`` chunks.

    Chunks run through joblib and are stacked back in submission order, so
    the result does not depend on scheduling.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        return func(rows)
    if n_jobs == 1 or rows.shape[0] == 1:
        return np.asarray(func(rows))
    workers = rows.shape[0] if n_jobs < 0 else min(n_jobs, rows.shape[0])
    chunks = np.array_split(rows, workers)
    results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(func)(chunk) for chunk in chunks)
    return np.concatenate(results, axis=0)


@dataclass(frozen=True)
class LinearOperatorHandle:
    """A linear map known only through its action.

    ``apply`` takes an ``(n,)`` vector or a ``(k, n)`` block of row vectors.
    """

    dimension: int
    apply: RowsFunction
    symmetric: bool = True
    n_jobs: int = 1

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dimension:
            raise ValueError(f"operator acts on dimension {self.dimension}, got {v.shape[-1]}")
        return self.apply(v)

    def apply_columns(self, columns: np.ndarray) -> np.ndarray:
        """``A @ columns`` for an ``(n, k)`` matrix, columns dispatched per ``n_jobs``."""
        columns = np.asarray(columns, dtype=np.float64)
        if columns.shape[0] != self.dimension:
            raise ValueError(f"operator acts on dimension {self.dimension}, got {columns.shape[0]} rows")
        return map_rows(self, columns.T, self.n_jobs).T

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, *, symmetric: Optional[bool] = None) -> "LinearOperatorHandle":
        matrix = np.asarray(matrix, dtype=np.float64)
        if symmetric is None:
            symmetric = matrix.shape[0] == matrix.shape[1] and np.allclose(matrix, matrix.T)
        return cls(matrix.shape[1], lambda v: v @ matrix.T, symmetric=symmetric)

    def to_dense(self) -> np.ndarray:
        return self.apply_columns(np.eye(self.dimension))


# --------------------------------------------------------------------------
# Conjugate gradients


@dataclass
class CGResult:
    x: np.ndarray
    residual_history: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.residual_history) - 1, 0)


def cg_solve(
    A: LinearOperatorHandle,
    b: np.ndarray,
    tol: float = 1e-8,
    max_iters: int = 500,
    x0: Optional[np.ndarray] = None,
) -> CGResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops once ``||b - A x|| <= tol ||b||``. The history holds the recurrence
    residual norm before the first step and after every step.
    """
    if not A.symmetric:
        raise ValueError("conjugate gradients needs a symmetric operator")
    if tol < 0:
        raise ValueError("tol must be non-negative")
    if max_iters < 0:
        raise ValueError("max_iters must be non-negative")
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side contains non-finite values")

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(np.zeros_like(b), [0.0], converged=True)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A(x) if x0 is not None else b.copy()
    p = r.copy()
    delta = float(r @ r)
    result = CGResult(x, [np.sqrt(delta)])
    threshold = tol * b_norm

    for iteration in range(1, max_iters + 1):
        if np.sqrt(delta) <= threshold:
            break
        Ap = A(p)
        curvature = float(p @ Ap)
        if curvature <= 0.0:
            raise NegativeCurvatureError(x.copy(), iteration, curvature)
        alpha = delta / curvature
        x += alpha * p
        r -= alpha * Ap
        new_delta = float(r @ r)
        p = r + (new_delta / delta) * p
        delta = new_delta
        result.residual_history.append(np.sqrt(delta))

    result.x = x
    result.converged = bool(np.sqrt(delta) <= threshold)
    if result.converged:
        logger.debug("CG converged in %d iterations, relative residual %.3e", result.iterations, np.sqrt(delta) / b_norm)
    else:
        logger.warning("CG stopped after %d iterations, relative residual %.3e", result.iterations, np.sqrt(delta) / b_norm)
    return result


# --------------------------------------------------------------------------
# Lanczos


class Which(str, enum.Enum):
    SMALLEST = "smallest"
    LARGEST = "largest"


@dataclass(frozen=True)
class EigenPairs:
    """Ritz pairs, values ascending, vectors as orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    norm_estimate: float
    subspace_size: int
    converged: bool

    @property
    def count(self) -> int:
        return self.values.shape[0]


def estimate_norm(A: LinearOperatorHandle, iterations: int = NORM_POWER_ITERATIONS, seed: int = 0) -> float:
    """Spectral norm estimate of a symmetric operator by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.dimension)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = A(v)
        estimate = float(np.linalg.norm(w))
        if estimate == 0.0:
            break
        v = w / estimate
    return estimate


def _orthogonalize(w: np.ndarray, basis: np.ndarray) -> np.ndarray:
    # two passes of classical Gram-Schmidt against the stored basis
    for _ in range(2):
        w = w - basis.T @ (basis @ w)
    return w


def lanczos_extremal(
    A: LinearOperatorHandle,
    p: int,
    which: Which = Which.SMALLEST,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
    seed: int = 0,
) -> EigenPairs:
    """``p`` extremal eigenpairs of a symmetric operator.

    Runs Lanczos with full reorthogonalization to a subspace of at least
    ``2 p + 10`` vectors (capped at the dimension) and keeps growing it until
    every wanted Ritz pair satisfies ``||A v - lambda v|| <= tol ||A||``.
    An invariant subspace found early is continued from a fresh random
    vector orthogonal to the basis.
    """
    which = Which(which)
    n = A.dimension
    if not 1 <= p <= n:
        raise ValueError(f"p must lie in [1, {n}], got {p}")
    if not A.symmetric:
        raise ValueError("Lanczos needs a symmetric operator")
    limit = n if max_iters is None else min(n, max(max_iters, p))
    minimum = min(limit, 2 * p + 10)

    norm_estimate = estimate_norm(A, seed=seed)
    rng = np.random.default_rng(seed + 1)
    basis = np.zeros((limit, n))
    alphas: List[float] = []
    betas: List[float] = []

    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    beta = 0.0
    result: Optional[EigenPairs] = None
    for m in range(limit):
        basis[m] = q
        w = A(q)
        if m:
            w = w - beta * basis[m - 1]
        alpha = float(q @ w)
        w = _orthogonalize(w - alpha * q, basis[: m + 1])
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))

        size = m + 1
        if size >= minimum and (size == limit or (size - minimum) % 5 == 0):
            result = _ritz_pairs(basis[:size], alphas, betas, beta, p, which, tol, norm_estimate)
            if result.converged or size == limit:
                break

        if beta <= 1e-14 * max(norm_estimate, 1.0):
            # invariant subspace; continue from a fresh orthogonal direction
            fresh = _orthogonalize(rng.standard_normal(n), basis[:size])
            q = fresh / np.linalg.norm(fresh)
            betas.append(0.0)
            beta = 0.0
        else:
            q = w / beta
            betas.append(beta)

    assert result is not None
    if result.converged:
        logger.debug("Lanczos converged with subspace size %d", result.subspace_size)
    else:
        logger.warning(
            "Lanczos did not converge within %d vectors; max relative residual %.3e",
            result.subspace_size,
            float(result.residuals.max() / max(norm_estimate, np.finfo(float).tiny)),
        )
    return result


def _ritz_pairs(
    basis: np.ndarray,
    alphas: List[float],
    betas: List[float],
    last_beta: float,
    p: int,
    which: Which,
    tol: float,
    norm_estimate: float,
) -> EigenPairs:
    size = basis.shape[0]
    values, vectors = scipy.linalg.eigh_tridiagonal(np.asarray(alphas), np.asarray(betas[: size - 1]))
    chosen = np.arange(p) if which is Which.SMALLEST else np.arange(size - p, size)
    residuals = np.abs(last_beta * vectors[-1, chosen])
    ritz = basis.T @ vectors[:, chosen]
    converged = bool(np.all(residuals <= tol * max(norm_estimate, np.abs(values[chosen]).max())))
    return EigenPairs(
        values=values[chosen],
        vectors=ritz,
        residuals=residuals,
        norm_estimate=norm_estimate,
        subspace_size=size,
        converged=converged,
    )


# --------------------------------------------------------------------------
# Orthonormalization and dense factorizations


@dataclass(frozen=True)
class QRResult:
    q: np.ndarray
    retained: np.ndarray

    @property
    def effective_rank(self) -> int:
        return self.q.shape[1]


def qr_orthonormalize(columns: np.ndarray, rtol: float = QR_DROP_RTOL) -> QRResult:
    """Modified Gram-Schmidt with one reorthogonalization pass.

    A column whose remainder falls below ``rtol`` times its original norm is
    treated as dependent and dropped; ``retained`` lists the kept input columns.
    """
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2:
        raise ValueError("expected a two-dimensional matrix")
    n, count = columns.shape
    q = np.zeros((n, min(n, count)))
    retained = []
    for j in range(count):
        v = columns[:, j].copy()
        original = np.linalg.norm(v)
        for _ in range(2):
            for k in range(len(retained)):
                v -= (q[:, k] @ v) * q[:, k]
        remainder = np.linalg.norm(v)
        if original == 0.0 or remainder <= rtol * original or len(retained) == q.shape[1]:
            continue
        q[:, len(retained)] = v / remainder
        retained.append(j)
    if len(retained) < count:
        logger.info("QR retained %d of %d columns", len(retained), count)
    return QRResult(q=q[:, : len(retained)], retained=np.asarray(retained, dtype=int))


@dataclass(frozen=True)
class DenseFactorization:
    """``M = u diag(s) v^T``.

    For a thin SVD ``s`` is non-negative and descending; for a symmetric
    eigendecomposition ``u`` and ``v`` are the same eigenvector matrix and
    ``s`` holds the eigenvalues in ascending order.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def dense_svd(matrix: np.ndarray) -> DenseFactorization:
    matrix = np.asarray(matrix, dtype=np.float64)
    try:
        u, s, vt = scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.info("gesdd did not converge, retrying with gesvd")
        try:
            u, s, vt = scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise ObsImpactError(f"SVD did not converge: {exc}", phase="dense") from exc
    return DenseFactorization(u=u, s=s, v=vt.T)


def dense_symeig(matrix: np.ndarray) -> DenseFactorization:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("expected a square matrix")
    try:
        values, vectors = scipy.linalg.eigh(0.5 * (matrix + matrix.T))
    except np.linalg.LinAlgError as exc:
        raise ObsImpactError(f"symmetric eigendecomposition did not converge: {exc}", phase="dense") from exc
    return DenseFactorization(u=vectors, s=values, v=vectors)


__all__ = [
    "CGResult",
    "DenseFactorization",
    "EigenPairs",
    "LinearOperatorHandle",
    "QRResult",
    "Which",
    "cg_solve",
    "dense_svd",
    "dense_symeig",
    "estimate_norm",
    "lanczos_extremal",
    "map_rows",
    "qr_orthonormalize",
]
