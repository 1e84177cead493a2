"""Observation sensitivity and observation impact.

The impact matrix ``T`` stacks, over observation times, the blocks
``R_k^{-1} H_k M_{0,k} A_0`` where ``A_0`` is the inverse 4D-Var Hessian at
the analysis. Its products are available matrix-free (one CG solve plus one
linearized model run), densely at desk scale, and through two low-rank
factorizations.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import SizeGuardError
from .fourdvar import HessianOperator, HessVecMethod, Scenario
from .grid_state import Variable
from .observations import ObservationSet
from .operator_core import (
    CGResult,
    DenseFactorization,
    Which,
    cg_solve,
    dense_svd,
    dense_symeig,
    lanczos_extremal,
    map_rows,
    qr_orthonormalize,
)
from .swe_dynamics import Trajectory, adj_run, tlm_run

logger = logging.getLogger(__name__)

DENSE_STATE_CAP = 2000
PINV_RTOL = 1e-12
DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_MAX_ITERS = 500


class Provenance(str, enum.Enum):
    ITERATIVE = "iterative"
    RANDOMIZED = "randomized"
    DENSE_TRUNCATED = "dense_truncated"


@dataclass(frozen=True)
class ObsSensitivity:
    """One value per observation, in :class:`ObservationSet` order."""

    observations: ObservationSet
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (self.observations.size,):
            raise ValueError(f"expected {self.observations.size} sensitivity values, got {self.values.shape}")

    def for_variable(self, variable: "Variable | str | int") -> np.ndarray:
        return self.values[self.observations.variables() == Variable.parse(variable)]

    def for_time(self, time_index: int) -> np.ndarray:
        return self.values[self.observations.times() == time_index]

    def fields(self) -> np.ndarray:
        """State-shaped fields, one per observation time."""
        return self.observations.scatter_to_state(self.values)


@dataclass(frozen=True)
class SupersensitivityResult:
    mu: np.ndarray
    residual_history: Tuple[float, ...]
    converged: bool

    @property
    def iterations(self) -> int:
        return max(len(self.residual_history) - 1, 0)


@dataclass(frozen=True)
class LowRankImpact:
    """``T_(p) = left diag(singulars) right^T``.

    ``inverse_hessian`` holds the factored inverse (or pseudoinverse) Hessian
    the factors were built from, when one exists.
    """

    left: np.ndarray
    singulars: np.ndarray
    right: np.ndarray
    provenance: Provenance
    requested_rank: int
    flagged: bool = False
    inverse_hessian: Optional[DenseFactorization] = None

    def __post_init__(self) -> None:
        rank = self.singulars.shape[0]
        if self.left.shape[1] != rank or self.right.shape[1] != rank:
            raise ValueError("factor widths must match the number of singular values")

    @property
    def rank(self) -> int:
        return self.singulars.shape[0]

    def dense(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.right.T


def verification_gradient(x_a: np.ndarray, x_v: np.ndarray, C: Optional[np.ndarray] = None) -> np.ndarray:
    """``C (x_a - x_v)`` for identity (``None``) or diagonal weighting ``C``."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_v = np.asarray(x_v, dtype=np.float64)
    if x_a.shape != x_v.shape:
        raise ValueError("analysis and verification states differ in shape")
    increment = x_a - x_v
    if C is None:
        return increment
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 2:
        C = np.diag(C)
    if C.shape != increment.shape:
        raise ValueError("weighting must be diagonal with one entry per state variable")
    return C * increment


def _operator(scenario: Scenario, x_a: np.ndarray, method, n_jobs: int = 1):
    hessian = HessianOperator(scenario, x_a, method)
    return hessian, hessian.as_operator(n_jobs)


def supersensitivity(
    x_a: np.ndarray,
    scenario: Scenario,
    grad_psi: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iters: int = DEFAULT_CG_MAX_ITERS,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
) -> SupersensitivityResult:
    """Solve ``grad^2 J(x_a) mu = grad Psi`` by conjugate gradients."""
    grad_psi = np.asarray(grad_psi, dtype=np.float64)
    if not np.all(np.isfinite(grad_psi)):
        raise ValueError("grad_psi contains non-finite values")
    _, operator = _operator(scenario, x_a, hessvec_method)
    result: CGResult = cg_solve(operator, grad_psi, tol=tol, max_iters=max_iters)
    return SupersensitivityResult(result.x, tuple(result.residual_history), result.converged)


def _weighted_selection(observations: ObservationSet, snapshot_rows) -> np.ndarray:
    """``R_k^{-1} H_k`` applied per block to tangent states; concatenated over blocks."""
    parts = [
        block.select(snapshot_rows(block.time_index)) / block.variances
        for block in observations.blocks
    ]
    return np.concatenate(parts, axis=-1)


def obs_sensitivity(traj_at_xa: Trajectory, mu: np.ndarray, observations: ObservationSet) -> ObsSensitivity:
    """``R_k^{-1} H_k M_{0,k} mu`` from one tangent-linear run."""
    if tuple(traj_at_xa.obs_times) != observations.time_indices:
        raise ValueError("trajectory observation times do not match the observation set")
    snapshot = tlm_run(traj_at_xa, mu)
    return ObsSensitivity(observations, _weighted_selection(observations, snapshot.at_time))


def _obs_forcings(observations: ObservationSet, delta_y: np.ndarray) -> List[np.ndarray]:
    n = observations.grid.n
    return [
        block.scatter(part / block.variances, n)
        for block, part in zip(observations.blocks, observations.split(delta_y))
    ]


def obs_impact_apply(
    scenario: Scenario,
    x_a: np.ndarray,
    delta_y: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iters: int = DEFAULT_CG_MAX_ITERS,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
) -> np.ndarray:
    """Analysis change ``T^T delta_y``: one adjoint run, then a Hessian solve."""
    observations = scenario.observations
    delta_y = np.asarray(delta_y, dtype=np.float64)
    if delta_y.shape != (observations.size,):
        raise ValueError(f"delta_y needs {observations.size} entries, got shape {delta_y.shape}")
    hessian, operator = _operator(scenario, x_a, hessvec_method)
    pulled_back = adj_run(hessian.trajectory, _obs_forcings(observations, delta_y))
    return cg_solve(operator, pulled_back, tol=tol, max_iters=max_iters).x


# --------------------------------------------------------------------------
# Dense oracle


def _guard(scenario: Scenario, cap: int) -> None:
    if scenario.grid.n > cap:
        raise SizeGuardError(scenario.grid.n, cap)


def dense_hessian(
    scenario: Scenario,
    x_a: np.ndarray,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
    *,
    n_jobs: int = 1,
    cap: int = DENSE_STATE_CAP,
) -> np.ndarray:
    """The full Hessian from ``n`` Hessian-vector products, symmetrized."""
    _guard(scenario, cap)
    _, operator = _operator(scenario, x_a, hessvec_method, n_jobs)
    matrix = operator.to_dense()
    return 0.5 * (matrix + matrix.T)


def _dense_inverse(hessian: np.ndarray) -> np.ndarray:
    identity = np.eye(hessian.shape[0])
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(hessian), identity)
    except np.linalg.LinAlgError:
        warnings.warn("Hessian is not positive definite; inverting with LU", RuntimeWarning, stacklevel=3)
        return scipy.linalg.lu_solve(scipy.linalg.lu_factor(hessian), identity)


def _impact_rows(traj: Trajectory, observations: ObservationSet, columns: np.ndarray, n_jobs: int) -> np.ndarray:
    """``R^{-1} H M`` applied to the given ``(n, k)`` columns; returns ``(m, k)``."""

    def propagate(rows: np.ndarray) -> np.ndarray:
        snapshot = tlm_run(traj, rows)
        return _weighted_selection(observations, snapshot.at_time)

    if columns.shape[1] == 0:
        return np.zeros((observations.size, 0))
    return map_rows(propagate, columns.T, n_jobs).T


def build_full_impact_matrix(
    scenario: Scenario,
    x_a: np.ndarray,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
    *,
    n_jobs: int = 1,
    cap: int = DENSE_STATE_CAP,
) -> np.ndarray:
    """Dense ``T`` with one row per observation and one column per state variable."""
    _guard(scenario, cap)
    hessian = HessianOperator(scenario, x_a, hessvec_method)
    matrix = hessian.as_operator(n_jobs).to_dense()
    inverse = _dense_inverse(0.5 * (matrix + matrix.T))
    return _impact_rows(hessian.trajectory, scenario.observations, inverse, n_jobs)


# --------------------------------------------------------------------------
# Low-rank factorizations


def _factor_impact(
    weighted: np.ndarray,
    basis: np.ndarray,
    provenance: Provenance,
    requested_rank: int,
    flagged: bool,
    inverse_hessian: DenseFactorization,
) -> LowRankImpact:
    """SVD of ``weighted @ basis^T`` where ``basis`` has orthonormal columns."""
    svd = dense_svd(weighted)
    return LowRankImpact(
        left=svd.u,
        singulars=svd.s,
        right=basis @ svd.v,
        provenance=provenance,
        requested_rank=requested_rank,
        flagged=flagged,
        inverse_hessian=inverse_hessian,
    )


def lowrank_iterative(
    scenario: Scenario,
    x_a: np.ndarray,
    p: int,
    *,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> LowRankImpact:
    """Rank-``p`` impact factors from the ``p`` smallest Hessian eigenpairs.

    ``A_0 ~ V D^{-1} V^T``; the eigenvectors are propagated to the
    observations as ``W = R^{-1} H M V`` and the small matrix
    ``D^{-1} W^T W D^{-1}`` is diagonalized to give the singular values and
    right singular vectors. The left factor is ``W D^{-1} V_red`` scaled by
    the inverse singular values.
    """
    n = scenario.grid.n
    if not 1 <= p <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {p}")
    hessian = HessianOperator(scenario, x_a, hessvec_method)
    pairs = lanczos_extremal(hessian.as_operator(), p, Which.SMALLEST, tol=tol, max_iters=max_iters, seed=seed)
    flagged = not pairs.converged
    if np.any(pairs.values <= 0):
        warnings.warn("Hessian has non-positive Ritz values at the analysis", RuntimeWarning, stacklevel=2)

    V, D = pairs.vectors, pairs.values
    W = _impact_rows(hessian.trajectory, scenario.observations, V, n_jobs)
    scaled = W / D
    gram = dense_symeig(scaled.T @ scaled)
    order = np.argsort(gram.s)[::-1]
    d_red = np.clip(gram.s[order], 0.0, None)
    v_red = gram.v[:, order]
    singulars = np.sqrt(d_red)
    projected = scaled @ v_red
    left = np.zeros_like(projected)
    nonzero = singulars > PINV_RTOL * max(singulars.max(initial=0.0), np.finfo(float).tiny)
    left[:, nonzero] = projected[:, nonzero] / singulars[nonzero]
    logger.info("iterative low-rank impact: rank %d, largest singular value %.4e", p, singulars[0])
    return LowRankImpact(
        left=left,
        singulars=singulars,
        right=V @ v_red,
        provenance=Provenance.ITERATIVE,
        requested_rank=p,
        flagged=flagged,
        inverse_hessian=DenseFactorization(u=V, s=1.0 / D, v=V),
    )


def lowrank_randomized(
    scenario: Scenario,
    x_a: np.ndarray,
    p: int,
    seed: Optional[int] = 0,
    *,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
    n_jobs: int = 1,
) -> LowRankImpact:
    """Rank-``p`` impact factors from a randomized range finder on the Hessian.

    Gaussian test vectors are drawn so that the first ``p`` columns do not
    depend on the requested rank. The Hessian is compressed as ``U_A S V_B^T``
    and inverted as the pseudoinverse ``V_B S^+ U_A^T``; propagating ``V_B``
    forward gives ``T ~ Z S^+ U_A^T`` with ``Z = R^{-1} H M V_B``.
    """
    n = scenario.grid.n
    if not 1 <= p <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {p}")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((p, n)).T

    hessian = HessianOperator(scenario, x_a, hessvec_method)
    operator = hessian.as_operator(n_jobs)
    qr = qr_orthonormalize(operator.apply_columns(omega))
    flagged = qr.effective_rank < p
    if flagged:
        logger.warning("range finder kept %d of %d directions", qr.effective_rank, p)
    Q = qr.q

    B = operator.apply_columns(Q).T
    svd_b = dense_svd(B)
    U_A = Q @ svd_b.u
    cutoff = PINV_RTOL * svd_b.s.max(initial=0.0)
    s_plus = np.zeros_like(svd_b.s)
    kept = svd_b.s > cutoff
    s_plus[kept] = 1.0 / svd_b.s[kept]
    pinv = DenseFactorization(u=svd_b.v, s=s_plus, v=U_A)

    Z = _impact_rows(hessian.trajectory, scenario.observations, svd_b.v, n_jobs)
    impact = _factor_impact(Z * s_plus, U_A, Provenance.RANDOMIZED, p, flagged, pinv)
    logger.info("randomized low-rank impact: rank %d, largest singular value %.4e", impact.rank, impact.singulars[0])
    return impact


def dense_truncated(T: np.ndarray, p: int) -> LowRankImpact:
    """Best rank-``p`` approximation of a dense impact matrix."""
    svd = dense_svd(T)
    p = min(p, svd.s.shape[0])
    return LowRankImpact(
        left=svd.u[:, :p],
        singulars=svd.s[:p],
        right=svd.v[:, :p],
        provenance=Provenance.DENSE_TRUNCATED,
        requested_rank=p,
    )


def truncate(L: LowRankImpact, p: int) -> LowRankImpact:
    if not 0 <= p <= L.rank:
        raise ValueError(f"cannot truncate rank {L.rank} to {p}")
    return replace(L, left=L.left[:, :p], singulars=L.singulars[:p], right=L.right[:, :p])


def lowrank_apply(L: LowRankImpact, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != L.right.shape[0]:
        raise ValueError(f"state vector needs {L.right.shape[0]} entries, got {v.shape[-1]}")
    return L.left @ (L.singulars * (L.right.T @ v))


def lowrank_apply_transpose(L: LowRankImpact, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != L.left.shape[0]:
        raise ValueError(f"observation vector needs {L.left.shape[0]} entries, got {w.shape[-1]}")
    return L.right @ (L.singulars * (L.left.T @ w))


def lowrank_sensitivity(L: LowRankImpact, grad_psi: np.ndarray, observations: ObservationSet) -> ObsSensitivity:
    """Low-rank estimate ``T_(p) grad Psi`` of the observation sensitivity."""
    return ObsSensitivity(observations, lowrank_apply(L, grad_psi))


def dominant_directions(L: LowRankImpact, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """``sum_{i<=m} s_i^2 v_i`` on the state side and the same sum of left vectors."""
    if not 1 <= m <= L.rank:
        raise ValueError(f"m must lie in [1, {L.rank}], got {m}")
    weights = L.singulars[:m] ** 2
    return L.right[:, :m] @ weights, L.left[:, :m] @ weights


def first_directions(L: LowRankImpact) -> Tuple[np.ndarray, np.ndarray]:
    """Leading right (state) and left (observation) singular vectors."""
    return L.right[:, 0].copy(), L.left[:, 0].copy()


@dataclass(frozen=True)
class TruncationPoint:
    rank: int
    sensitivity_error: float
    relative_error: float
    matrix_error: Optional[float] = None


def truncation_error_curve(
    scenario: Scenario,
    x_a: np.ndarray,
    ranks: Sequence[int],
    *,
    algorithm: "Provenance | str" = Provenance.ITERATIVE,
    T_dense: Optional[np.ndarray] = None,
    reference_sensitivity: Optional[np.ndarray] = None,
    seed: int = 0,
    hessvec_method: "HessVecMethod | str" = HessVecMethod.SOA,
    n_jobs: int = 1,
) -> List[TruncationPoint]:
    """Sensitivity (and, given the dense oracle, matrix) error of rank-``p`` factors.

    The verification gradient is the analysis increment. Without
    ``reference_sensitivity`` the dense oracle is built, which is size-guarded.
    """
    algorithm = Provenance(algorithm)
    increment = verification_gradient(x_a, scenario.verification_state, scenario.weighting)
    if reference_sensitivity is None:
        if T_dense is None:
            T_dense = build_full_impact_matrix(scenario, x_a, hessvec_method, n_jobs=n_jobs)
        reference_sensitivity = T_dense @ increment
    reference_norm = float(np.linalg.norm(reference_sensitivity))
    T_norm = None if T_dense is None else float(np.linalg.norm(T_dense))

    points = []
    for p in ranks:
        if p == 0:
            estimate = np.zeros_like(reference_sensitivity)
            matrix_error = T_norm
        else:
            if algorithm is Provenance.ITERATIVE:
                L = lowrank_iterative(scenario, x_a, p, hessvec_method=hessvec_method, seed=seed, n_jobs=n_jobs)
            elif algorithm is Provenance.RANDOMIZED:
                L = lowrank_randomized(scenario, x_a, p, seed, hessvec_method=hessvec_method, n_jobs=n_jobs)
            else:
                if T_dense is None:
                    raise ValueError("dense truncation needs the dense impact matrix")
                L = dense_truncated(T_dense, p)
            estimate = lowrank_apply(L, increment)
            matrix_error = None if T_dense is None else float(np.linalg.norm(T_dense - L.dense()))
        error = float(np.linalg.norm(reference_sensitivity - estimate))
        relative = error / reference_norm if reference_norm > 0 else error
        points.append(TruncationPoint(int(p), error, relative, matrix_error))
        logger.debug("rank %d: sensitivity error %.4e", p, error)
    return points


__all__ = [
    "DENSE_STATE_CAP",
    "LowRankImpact",
    "ObsSensitivity",
    "Provenance",
    "SupersensitivityResult",
    "TruncationPoint",
    "build_full_impact_matrix",
    "dense_hessian",
    "dense_truncated",
    "dominant_directions",
    "first_directions",
    "lowrank_apply",
    "lowrank_apply_transpose",
    "lowrank_iterative",
    "lowrank_randomized",
    "lowrank_sensitivity",
    "obs_impact_apply",
    "obs_sensitivity",
    "supersensitivity",
    "truncate",
    "truncation_error_curve",
    "verification_gradient",
]
