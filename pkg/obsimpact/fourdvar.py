"""Strong-constraint 4D-Var: cost, gradient, Hessian-vector products and L-BFGS minimization."""
from __future__ import annotations

import enum
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import line_search

from .covariance import BackgroundCov, apply_inv_background, build_obs_cov
from .errors import ObsImpactError
from .grid_state import Grid, Variable
from .observations import ObservationSet
from .operator_core import LinearOperatorHandle
from .swe_dynamics import ModelConfig, Trajectory, adj_run, fwd_run, soa_run, tlm_run

logger = logging.getLogger(__name__)

DEFAULT_ERROR_FRAC = 0.01
WOLFE_C1 = 1e-4
WOLFE_C2 = 0.9


@dataclass(frozen=True)
class Scenario:
    """Everything the 4D-Var cost depends on.

    The verification functional defaults to the background with identity
    weighting, so its gradient at the analysis is the increment ``x_a - x_b``.
    """

    grid: Grid
    model: ModelConfig
    background: np.ndarray
    background_cov: BackgroundCov
    observations: ObservationSet
    verification: Optional[np.ndarray] = None
    weighting: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.background.shape != (self.grid.n,):
            raise ValueError(f"background needs shape ({self.grid.n},)")
        times = self.observations.time_indices
        if times and (times[0] < 0 or times[-1] > self.model.num_steps):
            raise ValueError(f"observation times must lie in [0, {self.model.num_steps}]")

    @property
    def obs_times(self) -> Tuple[int, ...]:
        return self.observations.time_indices

    @property
    def verification_state(self) -> np.ndarray:
        return self.background if self.verification is None else self.verification

    def trajectory(self, x0: np.ndarray) -> Trajectory:
        return fwd_run(x0, self.grid, self.model, self.obs_times)

    def with_observations(self, observations: ObservationSet) -> "Scenario":
        return replace(self, observations=observations)


def generate_observations(
    ref_traj: Trajectory,
    obs_times: Optional[Sequence[int]],
    noise_frac: float,
    seed: Optional[int],
    *,
    error_frac: float = DEFAULT_ERROR_FRAC,
    layout: Optional[ObservationSet] = None,
) -> ObservationSet:
    """Synthetic observations of a reference trajectory.

    Error variances come from ``error_frac`` of the noise-free values of each
    variable; the added Gaussian noise uses ``noise_frac`` the same way, so
    ``noise_frac = 0`` yields perfect observations.
    """
    if noise_frac < 0:
        raise ValueError("noise_frac must be non-negative")
    times = ref_traj.obs_times if obs_times is None else obs_times
    if layout is None:
        layout = ObservationSet.full_coverage(ref_traj.grid, times)
    truth = np.concatenate([block.select(ref_traj.at(block.time_index)) for block in layout.blocks])
    variables = layout.variables()
    variances = build_obs_cov(truth, error_frac, variables).variances

    values = truth.copy()
    if noise_frac > 0:
        noise_std = np.sqrt(build_obs_cov(truth, noise_frac, variables).variances)
        rng = np.random.default_rng(seed)
        values += noise_std * rng.standard_normal(truth.shape[0])
    logger.debug("generated %d observations at times %s", truth.shape[0], layout.time_indices)
    return layout.with_values(values).with_variances(variances)


# --------------------------------------------------------------------------
# Cost and gradient


def _obs_forcings(traj: Trajectory, scenario: Scenario) -> Tuple[float, List[np.ndarray]]:
    """Observation cost and the forcings ``H_k^T R_k^{-1} (H_k x_k - y_k)``."""
    total = 0.0
    forcings = []
    for block in scenario.observations.blocks:
        residual = block.select(traj.at(block.time_index)) - block.values
        weighted = residual / block.variances
        total += 0.5 * float(residual @ weighted)
        forcings.append(block.scatter(weighted, scenario.grid.n))
    return total, forcings


def _check_state(x0: np.ndarray, scenario: Scenario) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (scenario.grid.n,):
        raise ValueError(f"state needs shape ({scenario.grid.n},), got {x0.shape}")
    return x0


def cost(x0: np.ndarray, scenario: Scenario) -> float:
    x0 = _check_state(x0, scenario)
    increment = x0 - scenario.background
    background_term = 0.5 * float(increment @ apply_inv_background(scenario.background_cov, increment))
    obs_term, _ = _obs_forcings(scenario.trajectory(x0), scenario)
    return background_term + obs_term


def cost_and_gradient(x0: np.ndarray, scenario: Scenario) -> Tuple[float, np.ndarray]:
    """``J`` and ``grad J`` from one forward run and one adjoint run."""
    x0 = _check_state(x0, scenario)
    increment = x0 - scenario.background
    weighted = apply_inv_background(scenario.background_cov, increment)
    traj = scenario.trajectory(x0)
    obs_term, forcings = _obs_forcings(traj, scenario)
    value = 0.5 * float(increment @ weighted) + obs_term
    return value, weighted + adj_run(traj, forcings)


def gradient(x0: np.ndarray, scenario: Scenario) -> np.ndarray:
    return cost_and_gradient(x0, scenario)[1]


# --------------------------------------------------------------------------
# Hessian-vector products


class HessVecMethod(str, enum.Enum):
    SOA = "soa"
    FD_GRAD = "fd_grad"
    GAUSS_NEWTON = "gauss_newton"

    @classmethod
    def parse(cls, value: "HessVecMethod | str") -> "HessVecMethod":
        if isinstance(value, HessVecMethod):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(method.value for method in cls)
            raise ValueError(f"unknown Hessian-vector method {value!r}; expected one of {choices}") from None


class HessianOperator:
    """``grad^2 J(x0)`` products that share one forward trajectory.

    ``apply`` accepts a single direction or a ``(k, n)`` block of directions.
    """

    def __init__(
        self,
        scenario: Scenario,
        x0: np.ndarray,
        method: "HessVecMethod | str" = HessVecMethod.SOA,
        *,
        epsilon: Optional[float] = None,
    ) -> None:
        self.scenario = scenario
        self.x0 = _check_state(x0, scenario)
        self.method = HessVecMethod.parse(method)
        self.epsilon = epsilon
        self._traj: Optional[Trajectory] = None
        self._gradient: Optional[np.ndarray] = None
        if self.method is HessVecMethod.FD_GRAD:
            self._gradient = gradient(self.x0, scenario)
        else:
            self._traj = scenario.trajectory(self.x0)
            _, self._forcings = _obs_forcings(self._traj, scenario)

    @property
    def trajectory(self) -> Trajectory:
        if self._traj is None:
            self._traj = self.scenario.trajectory(self.x0)
        return self._traj

    def _obs_curvature(self, block):
        n = self.scenario.grid.n
        return lambda d: block.scatter(block.select(d) / block.variances, n)

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.scenario.grid.n:
            raise ValueError(f"direction needs trailing dimension {self.scenario.grid.n}, got {u.shape[-1]}")
        if u.ndim == 1 and not np.any(u):
            warnings.warn("Hessian-vector product requested along a zero direction", RuntimeWarning, stacklevel=2)
            return np.zeros_like(u)

        background_term = apply_inv_background(self.scenario.background_cov, u)
        if self.method is HessVecMethod.SOA:
            blocks = self.scenario.observations.blocks
            obs_term = soa_run(self._traj, u, self._forcings, [self._obs_curvature(block) for block in blocks])
        elif self.method is HessVecMethod.GAUSS_NEWTON:
            snapshot = tlm_run(self._traj, u)
            forcings = [
                self._obs_curvature(block)(snapshot.at_time(block.time_index))
                for block in self.scenario.observations.blocks
            ]
            obs_term = adj_run(self._traj, forcings)
        else:
            if u.ndim == 1:
                return self._finite_difference(u)
            return np.stack([self._finite_difference(row) for row in u])
        return background_term + obs_term

    def _finite_difference(self, u: np.ndarray) -> np.ndarray:
        u_norm = float(np.linalg.norm(u))
        if u_norm == 0.0:
            return np.zeros_like(u)
        epsilon = self.epsilon
        if epsilon is None:
            epsilon = 1e-6 * max(float(np.linalg.norm(self.x0)), 1.0) / u_norm
        return (gradient(self.x0 + epsilon * u, self.scenario) - self._gradient) / epsilon

    def as_operator(self, n_jobs: int = 1) -> LinearOperatorHandle:
        return LinearOperatorHandle(self.scenario.grid.n, self.apply, symmetric=True, n_jobs=n_jobs)


def hessian_operator(
    x0: np.ndarray,
    scenario: Scenario,
    method: "HessVecMethod | str" = HessVecMethod.SOA,
    *,
    epsilon: Optional[float] = None,
) -> HessianOperator:
    return HessianOperator(scenario, x0, method, epsilon=epsilon)


def hess_vec(
    x0: np.ndarray,
    u: np.ndarray,
    scenario: Scenario,
    method: "HessVecMethod | str" = HessVecMethod.SOA,
    *,
    epsilon: Optional[float] = None,
) -> np.ndarray:
    return HessianOperator(scenario, x0, method, epsilon=epsilon).apply(u)


# --------------------------------------------------------------------------
# L-BFGS


class LBFGSHessianApproximation:
    """Limited-memory inverse Hessian built from step / gradient-change pairs."""

    def __init__(self, m: int) -> None:
        if m < 1:
            raise ValueError("memory must be at least 1")
        self._pairs: Deque[Tuple[float, np.ndarray, np.ndarray]] = deque(maxlen=m)
        self.theta = 1.0

    def __len__(self) -> int:
        return len(self._pairs)

    def append(self, s: np.ndarray, y: np.ndarray, s_inner_y: float) -> None:
        if s_inner_y <= 0.0:
            raise ValueError("s_inner_y must be positive")
        self._pairs.append((1.0 / s_inner_y, s.copy(), y.copy()))
        self.theta = float(y @ y) / s_inner_y

    def reset(self) -> None:
        self._pairs.clear()
        self.theta = 1.0

    def inverse_action(self, x: np.ndarray) -> np.ndarray:
        """Two-loop recursion with initial matrix ``I / theta``."""
        r = np.array(x, dtype=np.float64)
        alphas = []
        for rho, s, y in reversed(self._pairs):
            alpha = rho * float(s @ r)
            r -= alpha * y
            alphas.append(alpha)
        alphas.reverse()
        r /= self.theta
        for (rho, s, y), alpha in zip(self._pairs, alphas):
            beta = rho * float(y @ r)
            r += (alpha - beta) * s
        return r


@dataclass
class ConvergenceRecord:
    costs: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    rms: Dict[str, List[float]] = field(default_factory=dict)
    converged: bool = False
    line_search_failed: bool = False
    hessian_approx: Optional[LBFGSHessianApproximation] = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.costs) - 1

    def record(self, value: float, grad_norm: float, x: np.ndarray, reference: Optional[np.ndarray], grid: Grid) -> None:
        self.costs.append(value)
        self.grad_norms.append(grad_norm)
        if reference is not None:
            for variable in Variable:
                self.rms.setdefault(variable.label, []).append(rms_error(x, reference, variable, grid))


class _CostCache:
    """Evaluates ``J`` and its gradient together and remembers the last point."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self._x: Optional[np.ndarray] = None
        self._value = np.inf
        self._grad: Optional[np.ndarray] = None

    def _evaluate(self, x: np.ndarray) -> None:
        if self._x is not None and np.array_equal(x, self._x):
            return
        self._x = np.array(x, dtype=np.float64)
        try:
            self._value, self._grad = cost_and_gradient(self._x, self.scenario)
        except ObsImpactError as exc:
            logger.debug("cost evaluation failed during line search: %s", exc)
            self._value, self._grad = np.inf, np.zeros_like(self._x)

    def value(self, x: np.ndarray) -> float:
        self._evaluate(x)
        return self._value

    def grad(self, x: np.ndarray) -> np.ndarray:
        self._evaluate(x)
        return self._grad


def minimize(
    scenario: Scenario,
    x_init: np.ndarray,
    max_iters: int,
    *,
    memory: int = 10,
    reference: Optional[np.ndarray] = None,
    gtol: float = 1e-10,
) -> Tuple[np.ndarray, ConvergenceRecord]:
    """Unconstrained L-BFGS with a strong-Wolfe line search.

    Runs ``max_iters`` iterations unless the gradient norm drops below
    ``gtol (1 + |J|)`` or the line search fails; the best iterate is returned.
    With ``reference`` the record also tracks RMS errors per variable.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    x = _check_state(x_init, scenario).copy()
    cache = _CostCache(scenario)
    value, grad = cache.value(x), cache.grad(x)
    if not np.isfinite(value):
        raise ObsImpactError("cost is not finite at the initial state", phase="minimize")

    approx = LBFGSHessianApproximation(memory)
    record = ConvergenceRecord(hessian_approx=approx)
    grad_norm = float(np.linalg.norm(grad))
    record.record(value, grad_norm, x, reference, scenario.grid)
    best_value, best_x = value, x.copy()
    previous_value = value + 0.5 * grad_norm

    for iteration in range(1, max_iters + 1):
        if grad_norm < gtol * (1.0 + abs(value)):
            record.converged = True
            break
        direction = -approx.inverse_action(grad)
        if float(direction @ grad) >= 0.0:
            logger.debug("L-BFGS: not a descent direction, resetting memory")
            approx.reset()
            direction = -grad

        alpha, _, _, new_value, _, _ = line_search(
            cache.value,
            cache.grad,
            x,
            direction,
            gfk=grad,
            old_fval=value,
            old_old_fval=previous_value,
            c1=WOLFE_C1,
            c2=WOLFE_C2,
            maxiter=20,
        )
        if alpha is None or new_value is None or not np.isfinite(new_value):
            logger.warning("L-BFGS: line search failure at iteration %d", iteration)
            record.line_search_failed = True
            break

        step = alpha * direction
        x_new = x + step
        new_value, new_grad = cache.value(x_new), cache.grad(x_new)
        change = new_grad - grad
        s_inner_y = float(step @ change)
        if s_inner_y > 0.0:
            approx.append(step, change, s_inner_y)
        else:
            logger.debug("L-BFGS: skipping pair with non-positive curvature %.3e", s_inner_y)

        previous_value = value
        x, value, grad = x_new, new_value, new_grad
        grad_norm = float(np.linalg.norm(grad))
        record.record(value, grad_norm, x, reference, scenario.grid)
        logger.debug("L-BFGS: iteration %d, cost %.6e, gradient norm %.6e", iteration, value, grad_norm)
        if value < best_value:
            best_value, best_x = value, x.copy()
    else:
        record.converged = grad_norm < gtol * (1.0 + abs(value))

    logger.info(
        "L-BFGS finished after %d iterations: cost %.6e, gradient norm %.3e",
        record.iterations,
        best_value,
        grad_norm,
    )
    return best_x, record


def rms_error(x: np.ndarray, x_ref: np.ndarray, variable: "Variable | str | int", grid: Grid) -> float:
    part = grid.variable_slice(variable)
    diff = np.asarray(x, dtype=np.float64)[part] - np.asarray(x_ref, dtype=np.float64)[part]
    return float(np.sqrt(np.mean(diff * diff)))


__all__ = [
    "ConvergenceRecord",
    "HessVecMethod",
    "HessianOperator",
    "LBFGSHessianApproximation",
    "Scenario",
    "cost",
    "cost_and_gradient",
    "generate_observations",
    "gradient",
    "hess_vec",
    "hessian_operator",
    "minimize",
    "rms_error",
]
