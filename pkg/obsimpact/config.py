"""Experiment configuration: INI loading, defaults and validation."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from .errors import ConfigError
from .fourdvar import HessVecMethod
from .grid_state import Grid, make_grid
from .obs_impact import Provenance
from .swe_dynamics import DEFAULT_GRAVITY, ModelConfig


@dataclass(frozen=True)
class GridSection:
    q: int = 40
    domain_min: float = -3.0
    domain_max: float = 3.0


@dataclass(frozen=True)
class TimeSection:
    dt: float = 1e-4
    num_steps: int = 100
    gravity: float = DEFAULT_GRAVITY


@dataclass(frozen=True)
class CovarianceSection:
    bg_rel_std: float = 0.05
    corr_dist_cells: float = 5.0
    uv_std: float = 0.05
    seed: int = 7


@dataclass(frozen=True)
class ObservationSection:
    # empty means the final time only
    obs_times: Tuple[int, ...] = ()
    noise_frac: float = 0.01
    error_frac: float = 0.01
    seed: int = 11


@dataclass(frozen=True)
class OptimizerSection:
    max_iters: int = 100
    lbfgs_memory: int = 10
    hessvec_method: HessVecMethod = HessVecMethod.SOA
    cg_tol: float = 1e-8
    cg_max_iters: int = 500


@dataclass(frozen=True)
class LowRankSection:
    algorithm: Provenance = Provenance.ITERATIVE
    rank: int = 1600
    modes: int = 500
    seed: int = 0
    n_jobs: int = 1


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "circular_dam"
    output_dir: Path = Path("results")
    fault_locations: Tuple[Tuple[int, int], ...] = ((20, 20), (10, 10))
    fault_factor: float = 10.0
    pruning_checkpoint: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    """Defaults reproduce the q=40 circular-dam scenario."""

    grid: GridSection = field(default_factory=GridSection)
    time: TimeSection = field(default_factory=TimeSection)
    covariance: CovarianceSection = field(default_factory=CovarianceSection)
    observations: ObservationSection = field(default_factory=ObservationSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    lowrank: LowRankSection = field(default_factory=LowRankSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self) -> None:
        _validate(self)

    def make_grid(self) -> Grid:
        return make_grid(self.grid.q, self.grid.domain_min, self.grid.domain_max)

    def model_config(self) -> ModelConfig:
        return ModelConfig(dt=self.time.dt, num_steps=self.time.num_steps, gravity=self.time.gravity)

    @property
    def obs_times(self) -> Tuple[int, ...]:
        return self.observations.obs_times or (self.time.num_steps,)

    @property
    def state_size(self) -> int:
        return 3 * self.grid.q * self.grid.q

    def with_overrides(self, *, output_dir: Optional[Path] = None, seed: Optional[int] = None) -> "ExperimentConfig":
        """Apply command-line overrides; ``seed`` replaces every random seed."""
        config = self
        if output_dir is not None:
            config = replace(config, experiment=replace(config.experiment, output_dir=Path(output_dir)))
        if seed is not None:
            seed = _coerce_int(seed, "seed", minimum=0)
            config = replace(
                config,
                covariance=replace(config.covariance, seed=seed),
                observations=replace(config.observations, seed=seed),
                lowrank=replace(config.lowrank, seed=seed),
            )
        return config


# --------------------------------------------------------------------------
# Coercion helpers


def _coerce_int(value: Any, name: str, *, minimum: Optional[int] = None) -> int:
    try:
        candidate = int(str(value).strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer") from exc
    if minimum is not None and candidate < minimum:
        raise ConfigError(f"{name} must be at least {minimum}")
    return candidate


def _coerce_float(value: Any, name: str, *, sign: str = "positive") -> float:
    try:
        candidate = float(str(value).strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if not math.isfinite(candidate):
        raise ConfigError(f"{name} must be finite")
    if sign == "positive" and candidate <= 0:
        raise ConfigError(f"{name} must be positive")
    if sign == "non-negative" and candidate < 0:
        raise ConfigError(f"{name} must be non-negative")
    return candidate


def _coerce_int_list(value: Any, name: str) -> Tuple[int, ...]:
    text = str(value).strip()
    if not text or text.lower() == "final":
        return ()
    return tuple(_coerce_int(part, name, minimum=0) for part in text.split(","))


def _coerce_cells(value: Any, name: str) -> Tuple[Tuple[int, int], ...]:
    """``"20,20; 10,10"`` to ``((20, 20), (10, 10))``."""
    cells = []
    for chunk in str(value).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{name} entries must look like 'i,j', got {chunk!r}")
        cells.append((_coerce_int(parts[0], name, minimum=0), _coerce_int(parts[1], name, minimum=0)))
    return tuple(cells)


def _coerce_enum(enum_type, name: str) -> Callable[[Any], Any]:
    def coerce(value: Any) -> Any:
        try:
            return enum_type(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(member.value for member in enum_type)
            raise ConfigError(f"{name} must be one of {choices}") from None

    return coerce


_PARSERS: Dict[str, Dict[str, Callable[[Any], Any]]] = {
    "grid": {
        "q": lambda v: _coerce_int(v, "grid.q", minimum=3),
        "domain_min": lambda v: _coerce_float(v, "grid.domain_min", sign="any"),
        "domain_max": lambda v: _coerce_float(v, "grid.domain_max", sign="any"),
    },
    "time": {
        "dt": lambda v: _coerce_float(v, "time.dt"),
        "num_steps": lambda v: _coerce_int(v, "time.num_steps", minimum=1),
        "gravity": lambda v: _coerce_float(v, "time.gravity", sign="non-negative"),
    },
    "covariance": {
        "bg_rel_std": lambda v: _coerce_float(v, "covariance.bg_rel_std"),
        "corr_dist_cells": lambda v: _coerce_float(v, "covariance.corr_dist_cells"),
        "uv_std": lambda v: _coerce_float(v, "covariance.uv_std"),
        "seed": lambda v: _coerce_int(v, "covariance.seed", minimum=0),
    },
    "observations": {
        "obs_times": lambda v: _coerce_int_list(v, "observations.obs_times"),
        "noise_frac": lambda v: _coerce_float(v, "observations.noise_frac", sign="non-negative"),
        "error_frac": lambda v: _coerce_float(v, "observations.error_frac"),
        "seed": lambda v: _coerce_int(v, "observations.seed", minimum=0),
    },
    "optimizer": {
        "max_iters": lambda v: _coerce_int(v, "optimizer.max_iters", minimum=1),
        "lbfgs_memory": lambda v: _coerce_int(v, "optimizer.lbfgs_memory", minimum=1),
        "hessvec_method": _coerce_enum(HessVecMethod, "optimizer.hessvec_method"),
        "cg_tol": lambda v: _coerce_float(v, "optimizer.cg_tol"),
        "cg_max_iters": lambda v: _coerce_int(v, "optimizer.cg_max_iters", minimum=1),
    },
    "lowrank": {
        "algorithm": _coerce_enum(Provenance, "lowrank.algorithm"),
        "rank": lambda v: _coerce_int(v, "lowrank.rank", minimum=1),
        "modes": lambda v: _coerce_int(v, "lowrank.modes", minimum=1),
        "seed": lambda v: _coerce_int(v, "lowrank.seed", minimum=0),
        "n_jobs": lambda v: _coerce_int(v, "lowrank.n_jobs"),
    },
    "experiment": {
        "name": lambda v: str(v).strip(),
        "output_dir": lambda v: Path(str(v).strip()),
        "fault_locations": lambda v: _coerce_cells(v, "experiment.fault_locations"),
        "fault_factor": lambda v: _coerce_float(v, "experiment.fault_factor"),
        "pruning_checkpoint": lambda v: _coerce_int(v, "experiment.pruning_checkpoint", minimum=0),
    },
}

_SECTION_TYPES = {f.name: f.default_factory for f in fields(ExperimentConfig)}  # type: ignore[misc]


def _validate(config: ExperimentConfig) -> None:
    if config.grid.q < 3:
        raise ConfigError("grid.q must be at least 3")
    if not config.grid.domain_max > config.grid.domain_min:
        raise ConfigError("grid.domain_max must exceed grid.domain_min")
    if config.time.num_steps < 1:
        raise ConfigError("time.num_steps must be at least 1")
    for k in config.observations.obs_times:
        if not 0 <= k <= config.time.num_steps:
            raise ConfigError(f"observation time {k} outside [0, {config.time.num_steps}]")
    if config.lowrank.rank > config.state_size:
        raise ConfigError(f"lowrank.rank {config.lowrank.rank} exceeds the state size {config.state_size}")
    if config.lowrank.modes > config.lowrank.rank:
        raise ConfigError("lowrank.modes must not exceed lowrank.rank")
    if config.lowrank.n_jobs == 0:
        raise ConfigError("lowrank.n_jobs must be non-zero")
    if config.lowrank.algorithm is Provenance.DENSE_TRUNCATED:
        raise ConfigError("lowrank.algorithm must be iterative or randomized")
    for i, j in config.experiment.fault_locations:
        if not (i < config.grid.q and j < config.grid.q):
            raise ConfigError(f"fault location ({i}, {j}) outside a {config.grid.q}x{config.grid.q} grid")


def parse_config(text: str, *, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc

    sections: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in _PARSERS:
            raise ConfigError(f"unknown section [{section}] in {source}")
        values = {}
        for key, raw in parser.items(section):
            if key not in _PARSERS[section]:
                raise ConfigError(f"unknown key {section}.{key} in {source}")
            values[key] = _PARSERS[section][key](raw)
        sections[section] = _SECTION_TYPES[section]()
        sections[section] = replace(sections[section], **values)
    return ExperimentConfig(**sections)


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


__all__ = [
    "CovarianceSection",
    "ExperimentConfig",
    "ExperimentSection",
    "GridSection",
    "LowRankSection",
    "ObservationSection",
    "OptimizerSection",
    "TimeSection",
    "load_config",
    "parse_config",
]
