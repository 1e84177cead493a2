"""Shallow-water forward model with its tangent-linear, adjoint and second-order adjoint.

The forward step is the two-stage Richtmyer Lax-Wendroff scheme on the
conservative variables ``(h, hu, hv)`` over a periodic cell-centered grid.
Half-step values live on the east faces (``i + 1/2``) and the north faces
(``j + 1/2``); the full step is a conservative flux difference.

One step is written as a chain of pointwise maps (primitive/conservative
conversion and the two flux functions) joined by linear stencil stages. The
tangent-linear step applies the pointwise Jacobians along the same chain, the
adjoint step walks it backwards with transposed stages, and the
second-order adjoint differentiates the adjoint walk along a tangent
direction. All of them are exact derivatives of the discrete scheme.

Linearized routines accept perturbations with a leading batch axis, so a
block of directions can be propagated in one sweep.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CFLViolationError, ModelStateError
from .grid_state import Grid

logger = logging.getLogger(__name__)

DEFAULT_GRAVITY = 9.8

Triple = Tuple[np.ndarray, np.ndarray, np.ndarray]
ForcingJacobian = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    dt: float
    num_steps: int
    gravity: float = DEFAULT_GRAVITY

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.num_steps < 0:
            raise ValueError("num_steps must be non-negative")
        if self.gravity < 0:
            raise ValueError("gravity must be non-negative")

    @property
    def window(self) -> float:
        return self.dt * self.num_steps


@dataclass(frozen=True)
class Trajectory:
    """Checkpointed model states ``x_0 ... x_N`` and the observation time indices."""

    grid: Grid
    config: ModelConfig
    states: np.ndarray
    obs_times: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.states.setflags(write=False)

    @property
    def num_steps(self) -> int:
        return self.states.shape[0] - 1

    def at(self, k: int) -> np.ndarray:
        return self.states[k]

    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class TangentSnapshot:
    """Tangent-linear perturbations ``M_{0,k} dx0`` at each observation time."""

    obs_times: Tuple[int, ...]
    perturbations: np.ndarray = field(repr=False)

    def at_time(self, k: int) -> np.ndarray:
        return self.perturbations[self.obs_times.index(k)]


# --------------------------------------------------------------------------
# Stencil shifts (axis -2 runs along x, axis -1 along y)


def _east(a: np.ndarray) -> np.ndarray:
    return np.roll(a, -1, axis=-2)


def _west(a: np.ndarray) -> np.ndarray:
    return np.roll(a, 1, axis=-2)


def _north(a: np.ndarray) -> np.ndarray:
    return np.roll(a, -1, axis=-1)


def _south(a: np.ndarray) -> np.ndarray:
    return np.roll(a, 1, axis=-1)


def _add(*triples: Triple) -> Triple:
    return tuple(sum(components) for components in zip(*triples))  # type: ignore[return-value]


# --------------------------------------------------------------------------
# Pointwise maps. ``vjp_jvp(x, dx, bar)`` is the derivative of ``vjp(x, bar)``
# along ``dx``, i.e. the second-derivative tensor contracted with ``dx`` and
# ``bar``.


class _ToConservative:
    """``(h, u, v) -> (h, hu, hv)``"""

    @staticmethod
    def value(x: Triple) -> Triple:
        h, u, v = x
        return h, h * u, h * v

    @staticmethod
    def jvp(x: Triple, dx: Triple) -> Triple:
        h, u, v = x
        dh, du, dv = dx
        return dh, u * dh + h * du, v * dh + h * dv

    @staticmethod
    def vjp(x: Triple, bar: Triple) -> Triple:
        h, u, v = x
        a, b, c = bar
        return a + u * b + v * c, h * b, h * c

    @staticmethod
    def vjp_jvp(x: Triple, dx: Triple, bar: Triple) -> Triple:
        dh, du, dv = dx
        _, b, c = bar
        return du * b + dv * c, dh * b, dh * c


class _ToPrimitive:
    """``(h, m, n) -> (h, m/h, n/h)``"""

    @staticmethod
    def value(x: Triple) -> Triple:
        h, m, n = x
        return h, m / h, n / h

    @staticmethod
    def jvp(x: Triple, dx: Triple) -> Triple:
        h, m, n = x
        dh, dm, dn = dx
        u, v = m / h, n / h
        return dh, (dm - u * dh) / h, (dn - v * dh) / h

    @staticmethod
    def vjp(x: Triple, bar: Triple) -> Triple:
        h, m, n = x
        a, b, c = bar
        u, v = m / h, n / h
        return a - (u * b + v * c) / h, b / h, c / h

    @staticmethod
    def vjp_jvp(x: Triple, dx: Triple, bar: Triple) -> Triple:
        h, m, n = x
        dh, dm, dn = dx
        _, b, c = bar
        h2 = h * h
        return (
            2.0 * (m * b + n * c) * dh / (h2 * h) - (dm * b + dn * c) / h2,
            -b * dh / h2,
            -c * dh / h2,
        )


class _FluxX:
    """``(h, m, n) -> (m, m^2/h + g h^2/2, m n/h)``"""

    def __init__(self, gravity: float) -> None:
        self.gravity = gravity

    def value(self, x: Triple) -> Triple:
        h, m, n = x
        u = m / h
        return m, m * u + 0.5 * self.gravity * h * h, n * u

    def jvp(self, x: Triple, dx: Triple) -> Triple:
        h, m, n = x
        dh, dm, dn = dx
        u, v = m / h, n / h
        return dm, (self.gravity * h - u * u) * dh + 2.0 * u * dm, v * dm + u * dn - u * v * dh

    def vjp(self, x: Triple, bar: Triple) -> Triple:
        h, m, n = x
        a, b, c = bar
        u, v = m / h, n / h
        return (self.gravity * h - u * u) * b - u * v * c, a + 2.0 * u * b + v * c, u * c

    def vjp_jvp(self, x: Triple, dx: Triple, bar: Triple) -> Triple:
        h, m, n = x
        dh, dm, dn = dx
        _, b, c = bar
        u, v = m / h, n / h
        du = (dm - u * dh) / h
        dv = (dn - v * dh) / h
        return (
            (self.gravity * dh - 2.0 * u * du) * b - (du * v + u * dv) * c,
            2.0 * du * b + dv * c,
            du * c,
        )


class _FluxY:
    """``(h, m, n) -> (n, m n/h, n^2/h + g h^2/2)``, the x flux with the momenta swapped."""

    def __init__(self, gravity: float) -> None:
        self._flux = _FluxX(gravity)

    def value(self, x: Triple) -> Triple:
        f0, f1, f2 = self._flux.value((x[0], x[2], x[1]))
        return f0, f2, f1

    def jvp(self, x: Triple, dx: Triple) -> Triple:
        f0, f1, f2 = self._flux.jvp((x[0], x[2], x[1]), (dx[0], dx[2], dx[1]))
        return f0, f2, f1

    def vjp(self, x: Triple, bar: Triple) -> Triple:
        bh, bn, bm = self._flux.vjp((x[0], x[2], x[1]), (bar[0], bar[2], bar[1]))
        return bh, bm, bn

    def vjp_jvp(self, x: Triple, dx: Triple, bar: Triple) -> Triple:
        bh, bn, bm = self._flux.vjp_jvp((x[0], x[2], x[1]), (dx[0], dx[2], dx[1]), (bar[0], bar[2], bar[1]))
        return bh, bm, bn


@dataclass(frozen=True)
class _StepPieces:
    """Forward intermediates of one step; the linearization point for the derived models."""

    s: Triple
    U: Triple
    Ux: Triple
    Uy: Triple
    Un: Triple


@dataclass(frozen=True)
class _StepTangent:
    ds: Triple
    dU: Triple
    dUx: Triple
    dUy: Triple
    dUn: Triple


class _Stepper:
    """One Lax-Wendroff step and its derivatives for a fixed grid and configuration."""

    def __init__(self, grid: Grid, config: ModelConfig) -> None:
        self.grid = grid
        self.config = config
        self.lam_x = config.dt / grid.dx
        self.lam_y = config.dt / grid.dy
        self.flux_x = _FluxX(config.gravity)
        self.flux_y = _FluxY(config.gravity)

    # linear stages and their transposes

    def _half_x(self, U: Triple, F: Triple) -> Triple:
        return tuple(0.5 * (u + _east(u)) - 0.5 * self.lam_x * (_east(f) - f) for u, f in zip(U, F))  # type: ignore[return-value]

    def _half_y(self, U: Triple, G: Triple) -> Triple:
        return tuple(0.5 * (u + _north(u)) - 0.5 * self.lam_y * (_north(g) - g) for u, g in zip(U, G))  # type: ignore[return-value]

    def _half_x_t(self, bar: Triple) -> Tuple[Triple, Triple]:
        bU = tuple(0.5 * (b + _west(b)) for b in bar)
        bF = tuple(0.5 * self.lam_x * (b - _west(b)) for b in bar)
        return bU, bF  # type: ignore[return-value]

    def _half_y_t(self, bar: Triple) -> Tuple[Triple, Triple]:
        bU = tuple(0.5 * (b + _south(b)) for b in bar)
        bG = tuple(0.5 * self.lam_y * (b - _south(b)) for b in bar)
        return bU, bG  # type: ignore[return-value]

    def _update(self, U: Triple, FX: Triple, GY: Triple) -> Triple:
        return tuple(  # type: ignore[return-value]
            u - self.lam_x * (fx - _west(fx)) - self.lam_y * (gy - _south(gy))
            for u, fx, gy in zip(U, FX, GY)
        )

    def _update_t(self, bar: Triple) -> Tuple[Triple, Triple, Triple]:
        bFX = tuple(-self.lam_x * (b - _east(b)) for b in bar)
        bGY = tuple(-self.lam_y * (b - _north(b)) for b in bar)
        return bar, bFX, bGY  # type: ignore[return-value]

    # step and derivatives

    def pieces(self, s: Triple) -> Tuple[_StepPieces, Triple]:
        U = _ToConservative.value(s)
        Ux = self._half_x(U, self.flux_x.value(U))
        Uy = self._half_y(U, self.flux_y.value(U))
        Un = self._update(U, self.flux_x.value(Ux), self.flux_y.value(Uy))
        return _StepPieces(s, U, Ux, Uy, Un), _ToPrimitive.value(Un)

    def tangent(self, p: _StepPieces, ds: Triple) -> Tuple[_StepTangent, Triple]:
        dU = _ToConservative.jvp(p.s, ds)
        dUx = self._half_x(dU, self.flux_x.jvp(p.U, dU))
        dUy = self._half_y(dU, self.flux_y.jvp(p.U, dU))
        dUn = self._update(dU, self.flux_x.jvp(p.Ux, dUx), self.flux_y.jvp(p.Uy, dUy))
        return _StepTangent(ds, dU, dUx, dUy, dUn), _ToPrimitive.jvp(p.Un, dUn)

    def adjoint(self, p: _StepPieces, bar: Triple) -> Triple:
        bU, bFX, bGY = self._update_t(_ToPrimitive.vjp(p.Un, bar))
        bU1, bF = self._half_x_t(self.flux_x.vjp(p.Ux, bFX))
        bU2, bG = self._half_y_t(self.flux_y.vjp(p.Uy, bGY))
        total = _add(bU, bU1, bU2, self.flux_x.vjp(p.U, bF), self.flux_y.vjp(p.U, bG))
        return _ToConservative.vjp(p.s, total)

    def second_order(self, p: _StepPieces, t: _StepTangent, bar: Triple, dbar: Triple) -> Tuple[Triple, Triple]:
        """Adjoint step together with its derivative along the tangent ``t``."""
        bUn = _ToPrimitive.vjp(p.Un, bar)
        dbUn = _add(_ToPrimitive.vjp(p.Un, dbar), _ToPrimitive.vjp_jvp(p.Un, t.dUn, bar))
        bU, bFX, bGY = self._update_t(bUn)
        dbU, dbFX, dbGY = self._update_t(dbUn)

        bUx = self.flux_x.vjp(p.Ux, bFX)
        dbUx = _add(self.flux_x.vjp(p.Ux, dbFX), self.flux_x.vjp_jvp(p.Ux, t.dUx, bFX))
        bUy = self.flux_y.vjp(p.Uy, bGY)
        dbUy = _add(self.flux_y.vjp(p.Uy, dbGY), self.flux_y.vjp_jvp(p.Uy, t.dUy, bGY))

        bU1, bF = self._half_x_t(bUx)
        dbU1, dbF = self._half_x_t(dbUx)
        bU2, bG = self._half_y_t(bUy)
        dbU2, dbG = self._half_y_t(dbUy)

        total = _add(bU, bU1, bU2, self.flux_x.vjp(p.U, bF), self.flux_y.vjp(p.U, bG))
        dtotal = _add(
            dbU,
            dbU1,
            dbU2,
            self.flux_x.vjp(p.U, dbF),
            self.flux_x.vjp_jvp(p.U, t.dU, bF),
            self.flux_y.vjp(p.U, dbG),
            self.flux_y.vjp_jvp(p.U, t.dU, bG),
        )
        bs = _ToConservative.vjp(p.s, total)
        dbs = _add(_ToConservative.vjp(p.s, dtotal), _ToConservative.vjp_jvp(p.s, t.ds, total))
        return bs, dbs

    # flat-vector plumbing

    def to_triple(self, values: np.ndarray) -> Triple:
        fields = self.grid.split(values)
        return fields[..., 0, :, :], fields[..., 1, :, :], fields[..., 2, :, :]

    def to_flat(self, triple: Triple) -> np.ndarray:
        stacked = np.stack(np.broadcast_arrays(*triple), axis=-3)
        return stacked.reshape(stacked.shape[:-3] + (self.grid.n,))


# --------------------------------------------------------------------------
# Diagnostics


def total_mass(state: np.ndarray, grid: Grid) -> float:
    h = grid.split(state)[0]
    return float(h.sum() * grid.dx * grid.dy)


def cfl_number(state: np.ndarray, grid: Grid, config: ModelConfig) -> float:
    h, u, v = grid.split(state)
    celerity = np.sqrt(config.gravity * h)
    speed = np.maximum(np.abs(u) + celerity, np.abs(v) + celerity)
    return float(speed.max() * config.dt / grid.dx)


def _check_state(state: np.ndarray, grid: Grid, config: ModelConfig, step: Optional[int]) -> None:
    if not np.all(np.isfinite(state)):
        raise ModelStateError("non-finite model state", step=step)
    if np.any(grid.split(state)[0] <= 0.0):
        raise ModelStateError("non-positive layer thickness h", step=step)
    cfl = cfl_number(state, grid, config)
    if cfl > 1.0:
        raise CFLViolationError(cfl, step=step)


def circular_dam_state(
    grid: Grid,
    *,
    width: float = 1.0,
    amplitude: float = 1.0,
    base: float = 1.0,
) -> np.ndarray:
    """Gaussian bell of the given width centered on the grid, fluid at rest."""
    centers = grid.cell_centers() - 0.5 * (grid.domain_min + grid.domain_max)
    sigma = 0.5 * width
    r2 = centers[:, None] ** 2 + centers[None, :] ** 2
    h = base + amplitude * np.exp(-r2 / (2.0 * sigma * sigma))
    zeros = np.zeros_like(h)
    return np.concatenate([h.ravel(), zeros.ravel(), zeros.ravel()])


# --------------------------------------------------------------------------
# Runs


def _normalize_times(obs_times: Sequence[int], num_steps: int) -> Tuple[int, ...]:
    times = tuple(sorted({int(k) for k in obs_times}))
    if times and (times[0] < 0 or times[-1] > num_steps):
        raise ValueError(f"observation times must lie in [0, {num_steps}]")
    return times


def fwd_step(state: np.ndarray, grid: Grid, config: ModelConfig) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (grid.n,):
        raise ValueError(f"state needs shape ({grid.n},), got {state.shape}")
    _check_state(state, grid, config, None)
    stepper = _Stepper(grid, config)
    _, new = stepper.pieces(stepper.to_triple(state))
    return stepper.to_flat(new)


def fwd_run(
    x0: np.ndarray,
    grid: Grid,
    config: ModelConfig,
    obs_times: Sequence[int] = (),
) -> Trajectory:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (grid.n,):
        raise ValueError(f"state needs shape ({grid.n},), got {x0.shape}")
    times = _normalize_times(obs_times, config.num_steps)
    if not np.all(np.isfinite(x0)):
        raise ModelStateError("non-finite initial state", step=0)

    stepper = _Stepper(grid, config)
    states = np.empty((config.num_steps + 1, grid.n))
    states[0] = x0
    current = stepper.to_triple(x0)
    for k in range(config.num_steps):
        _check_state(states[k], grid, config, k)
        _, current = stepper.pieces(current)
        states[k + 1] = stepper.to_flat(current)
    if config.num_steps and not np.all(np.isfinite(states[-1])):
        raise ModelStateError("non-finite model state", step=config.num_steps)
    return Trajectory(grid=grid, config=config, states=states, obs_times=times)


def _check_perturbation(traj: Trajectory, values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1:] != (traj.grid.n,):
        raise ValueError(f"{name} needs trailing dimension {traj.grid.n}, got shape {values.shape}")
    return values


def _tangent_states(stepper: _Stepper, traj: Trajectory, dx0: np.ndarray) -> List[np.ndarray]:
    tangents = [dx0]
    current = stepper.to_triple(dx0)
    for k in range(traj.num_steps):
        pieces, _ = stepper.pieces(stepper.to_triple(traj.states[k]))
        _, current = stepper.tangent(pieces, current)
        tangents.append(stepper.to_flat(current))
    return tangents


def tlm_run(traj: Trajectory, dx0: np.ndarray) -> TangentSnapshot:
    """Propagate ``dx0`` (shape ``(n,)`` or ``(batch, n)``) to every observation time."""
    dx0 = _check_perturbation(traj, dx0, "dx0")
    stepper = _Stepper(traj.grid, traj.config)
    wanted = set(traj.obs_times)
    snapshots = {}
    current = stepper.to_triple(dx0)
    if 0 in wanted:
        snapshots[0] = dx0.copy()
    for k in range(traj.num_steps):
        pieces, _ = stepper.pieces(stepper.to_triple(traj.states[k]))
        _, current = stepper.tangent(pieces, current)
        if k + 1 in wanted:
            snapshots[k + 1] = stepper.to_flat(current)
    if traj.obs_times:
        perturbations = np.stack([snapshots[k] for k in traj.obs_times])
    else:
        perturbations = np.empty((0,) + dx0.shape)
    return TangentSnapshot(obs_times=traj.obs_times, perturbations=perturbations)


def _aligned_forcings(traj: Trajectory, forcings: Optional[Sequence[Optional[np.ndarray]]]) -> List[Optional[np.ndarray]]:
    if forcings is None:
        return [None] * len(traj.obs_times)
    forcings = list(forcings)
    if len(forcings) != len(traj.obs_times):
        raise ValueError(f"expected {len(traj.obs_times)} forcings, got {len(forcings)}")
    return [None if f is None else _check_perturbation(traj, f, "forcing") for f in forcings]


def adj_run(traj: Trajectory, forcings: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """Return ``sum_k M_{0,k}^T f_k`` from one reverse sweep over the trajectory."""
    aligned = _aligned_forcings(traj, forcings)
    stepper = _Stepper(traj.grid, traj.config)
    position = {k: idx for idx, k in enumerate(traj.obs_times)}
    batch = next((f.shape[:-1] for f in aligned if f is not None), ())
    lam = np.zeros(batch + (traj.grid.n,))
    for k in range(traj.num_steps, -1, -1):
        forcing = aligned[position[k]] if k in position else None
        if forcing is not None:
            lam = lam + forcing
        if k > 0:
            pieces, _ = stepper.pieces(stepper.to_triple(traj.states[k - 1]))
            lam = stepper.to_flat(stepper.adjoint(pieces, stepper.to_triple(lam)))
    return lam


def soa_run(
    traj: Trajectory,
    tangent_dir: np.ndarray,
    forcings: Optional[Sequence[Optional[np.ndarray]]],
    forcing_jacobians: Optional[Sequence[Optional[ForcingJacobian]]] = None,
) -> np.ndarray:
    """Derivative of :func:`adj_run` along ``tangent_dir`` (forward over reverse).

    ``forcing_jacobians[k]`` maps the tangent state at observation time ``k``
    to the derivative of the forcing injected there; ``None`` marks a forcing
    that does not depend on the state.
    """
    tangent_dir = _check_perturbation(traj, tangent_dir, "tangent_dir")
    aligned = _aligned_forcings(traj, forcings)
    if forcing_jacobians is None:
        jacobians: List[Optional[ForcingJacobian]] = [None] * len(traj.obs_times)
    else:
        jacobians = list(forcing_jacobians)
        if len(jacobians) != len(traj.obs_times):
            raise ValueError(f"expected {len(traj.obs_times)} forcing jacobians, got {len(jacobians)}")

    stepper = _Stepper(traj.grid, traj.config)
    tangents = _tangent_states(stepper, traj, tangent_dir)
    position = {k: idx for idx, k in enumerate(traj.obs_times)}
    batch = tangent_dir.shape[:-1]
    lam = np.zeros(batch + (traj.grid.n,))
    dlam = np.zeros(batch + (traj.grid.n,))
    for k in range(traj.num_steps, -1, -1):
        if k in position:
            idx = position[k]
            if aligned[idx] is not None:
                lam = lam + aligned[idx]
            if jacobians[idx] is not None:
                dlam = dlam + jacobians[idx](tangents[k])
        if k > 0:
            pieces, _ = stepper.pieces(stepper.to_triple(traj.states[k - 1]))
            tangent, _ = stepper.tangent(pieces, stepper.to_triple(tangents[k - 1]))
            bar, dbar = stepper.second_order(pieces, tangent, stepper.to_triple(lam), stepper.to_triple(dlam))
            lam, dlam = stepper.to_flat(bar), stepper.to_flat(dbar)
    return dlam


__all__ = [
    "DEFAULT_GRAVITY",
    "ModelConfig",
    "TangentSnapshot",
    "Trajectory",
    "adj_run",
    "cfl_number",
    "circular_dam_state",
    "fwd_run",
    "fwd_step",
    "soa_run",
    "tlm_run",
    "total_mass",
]
