"""Twin experiments on the circular-dam scenario, writing plot-ready CSV files.

Each ``run_*`` function builds the reference trajectory, the perturbed
background and synthetic observations from an :class:`ExperimentConfig`,
runs its phases in order and returns an :class:`ExperimentReport`. Output
files land under ``experiment.output_dir`` and are listed in
``manifest.txt``; wall times stay in the report and the log so repeated runs
produce identical bytes.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .covariance import build_background_cov, sample_background_perturbation
from .errors import ObsImpactError
from .fourdvar import ConvergenceRecord, Scenario, generate_observations, minimize, rms_error
from .grid_state import StateVector, Variable, encode_field_csv, format_real
from .obs_impact import (
    DENSE_STATE_CAP,
    LowRankImpact,
    ObsSensitivity,
    Provenance,
    dominant_directions,
    first_directions,
    lowrank_apply_transpose,
    lowrank_iterative,
    lowrank_randomized,
    obs_impact_apply,
    obs_sensitivity,
    supersensitivity,
    truncation_error_curve,
    verification_gradient,
)
from .observations import ObservationSet
from .swe_dynamics import circular_dam_state, fwd_run

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
FLAG_SIGMAS = 5.0


@dataclass(frozen=True)
class Flag:
    variable: Variable
    i: int
    j: int
    sensitivity: float


@dataclass
class ExperimentReport:
    name: str
    output_dir: Path
    files: List[str] = field(default_factory=list)
    wall_times: Dict[str, float] = field(default_factory=dict)
    convergence: Dict[str, ConvergenceRecord] = field(default_factory=dict)
    flags: List[Flag] = field(default_factory=list)
    notes: Dict[str, Any] = field(default_factory=dict)

    def path(self, relative: str) -> Path:
        return self.output_dir / relative

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        logger.info("%s: starting %s", self.name, name)
        started = time.perf_counter()
        try:
            yield
        except ObsImpactError as exc:
            if exc.phase is None:
                exc.phase = name
            logger.error("%s: %s failed: %s", self.name, name, exc)
            raise
        finally:
            self.wall_times[name] = time.perf_counter() - started
        logger.info("%s: finished %s in %.2f s", self.name, name, self.wall_times[name])

    def open_csv(self, relative: str):
        target = self.path(relative)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(relative)
        return target.open("w", encoding="utf-8", newline="")

    def write_manifest(self) -> Path:
        target = self.path(MANIFEST_NAME)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8", newline="") as handle:
            handle.write("".join(f"{name}\n" for name in self.files))
        return target


# --------------------------------------------------------------------------
# Scenario construction


@dataclass(frozen=True)
class TwinSetup:
    config: ExperimentConfig
    reference: np.ndarray
    scenario: Scenario

    @property
    def grid(self):
        return self.scenario.grid


def build_twin(config: ExperimentConfig, *, noise_frac: Optional[float] = None) -> TwinSetup:
    """Reference circular dam, perturbed background and synthetic observations."""
    grid = config.make_grid()
    model = config.model_config()
    reference = circular_dam_state(grid)
    ref_traj = fwd_run(reference, grid, model, config.obs_times)

    cov = config.covariance
    background_cov = build_background_cov(grid, reference, cov.bg_rel_std, cov.corr_dist_cells, cov.uv_std)
    background = reference + sample_background_perturbation(background_cov, cov.seed)

    obs = config.observations
    observations = generate_observations(
        ref_traj,
        config.obs_times,
        obs.noise_frac if noise_frac is None else noise_frac,
        obs.seed,
        error_frac=obs.error_frac,
    )
    scenario = Scenario(grid, model, background, background_cov, observations)
    return TwinSetup(config, reference, scenario)


def assimilate(setup: TwinSetup, scenario: Optional[Scenario] = None) -> Tuple[np.ndarray, ConvergenceRecord]:
    scenario = setup.scenario if scenario is None else scenario
    optimizer = setup.config.optimizer
    return minimize(
        scenario,
        scenario.background,
        optimizer.max_iters,
        memory=optimizer.lbfgs_memory,
        reference=setup.reference,
    )


def sensitivity_to_observations(setup: TwinSetup, scenario: Scenario, x_a: np.ndarray):
    """Supersensitivity of the increment norm and the resulting observation sensitivity."""
    optimizer = setup.config.optimizer
    grad_psi = verification_gradient(x_a, scenario.verification_state, scenario.weighting)
    mu = supersensitivity(
        x_a,
        scenario,
        grad_psi,
        tol=optimizer.cg_tol,
        max_iters=optimizer.cg_max_iters,
        hessvec_method=optimizer.hessvec_method,
    )
    sensitivity = obs_sensitivity(scenario.trajectory(x_a), mu.mu, scenario.observations)
    return mu, sensitivity


def compute_lowrank(setup: TwinSetup, x_a: np.ndarray, rank: Optional[int] = None) -> LowRankImpact:
    lowrank = setup.config.lowrank
    rank = lowrank.rank if rank is None else rank
    method = setup.config.optimizer.hessvec_method
    if lowrank.algorithm is Provenance.RANDOMIZED:
        return lowrank_randomized(setup.scenario, x_a, rank, lowrank.seed, hessvec_method=method, n_jobs=lowrank.n_jobs)
    return lowrank_iterative(setup.scenario, x_a, rank, hessvec_method=method, seed=lowrank.seed, n_jobs=lowrank.n_jobs)


# --------------------------------------------------------------------------
# Writers


def write_field(report: ExperimentReport, name: str, values: np.ndarray, grid) -> None:
    """``name`` may carry a subdirectory, as in ``"noisy/sensitivity"``."""
    folder, _, base = name.rpartition("/")
    relative = f"field_{base}.csv" if not folder else f"{folder}/field_{base}.csv"
    with report.open_csv(relative) as handle:
        handle.write(encode_field_csv(StateVector(grid, values)))


def write_obs_fields(report: ExperimentReport, name: str, observations: ObservationSet, values: np.ndarray) -> None:
    """Observation-space values as one state-shaped field per observation time."""
    fields = observations.scatter_to_state(values)
    times = observations.time_indices
    for position, time_index in enumerate(times):
        suffix = "" if len(times) == 1 else f"_t{time_index}"
        write_field(report, f"{name}{suffix}", fields[position], observations.grid)


def write_rms(report: ExperimentReport, prefix: str, record: ConvergenceRecord) -> None:
    for variable in Variable:
        with report.open_csv(f"{prefix}rms_{variable.label}.csv") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(("iteration", "rms"))
            for iteration, value in enumerate(record.rms.get(variable.label, [])):
                writer.writerow((iteration, format_real(value)))


def write_flags(report: ExperimentReport, flags: Sequence[Flag]) -> None:
    with report.open_csv("flags.csv") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("variable", "i", "j", "sensitivity"))
        for flag in flags:
            writer.writerow((flag.variable.label, flag.i, flag.j, format_real(flag.sensitivity)))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denominator = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(a @ b) / denominator if denominator > 0 else 0.0


def _report(config: ExperimentConfig, name: str) -> ExperimentReport:
    output_dir = Path(config.experiment.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    return ExperimentReport(name=name, output_dir=output_dir)


# --------------------------------------------------------------------------
# Experiments


def run_assimilation(config: ExperimentConfig) -> ExperimentReport:
    """Assimilate perfect and noisy observations and compare their sensitivities."""
    report = _report(config, "assimilation")
    sensitivities: Dict[str, np.ndarray] = {}
    for label, noise in (("perfect", 0.0), ("noisy", None)):
        with report.phase(f"setup {label}"):
            setup = build_twin(config, noise_frac=noise)
        with report.phase(f"minimize {label}"):
            x_a, record = assimilate(setup)
        report.convergence[label] = record
        write_rms(report, f"{label}/", record)
        with report.phase(f"sensitivity {label}"):
            _, sensitivity = sensitivity_to_observations(setup, setup.scenario, x_a)
        sensitivities[label] = sensitivity.values
        write_obs_fields(report, f"{label}/sensitivity", setup.scenario.observations, sensitivity.values)
        write_field(report, f"{label}/increment", x_a - setup.scenario.background, setup.grid)
        report.notes[f"{label}_rms_h_background"] = rms_error(setup.scenario.background, setup.reference, Variable.H, setup.grid)
        report.notes[f"{label}_rms_h_analysis"] = rms_error(x_a, setup.reference, Variable.H, setup.grid)

    report.notes["sensitivity_cosine"] = _cosine(sensitivities["perfect"], sensitivities["noisy"])
    report.write_manifest()
    return report


def pruning_mask(sensitivity: ObsSensitivity) -> np.ndarray:
    """HIGH set: the top half (rounded down) of each variable by ``|sensitivity|``."""
    variables = sensitivity.observations.variables()
    mask = np.zeros(sensitivity.values.shape[0], dtype=bool)
    for variable in np.unique(variables):
        members = np.flatnonzero(variables == variable)
        order = members[np.argsort(-np.abs(sensitivity.values[members]), kind="stable")]
        mask[order[: members.size // 2]] = True
    return mask


def run_pruning(config: ExperimentConfig) -> ExperimentReport:
    """Split observations by sensitivity and re-assimilate each half."""
    report = _report(config, "pruning")
    with report.phase("setup"):
        setup = build_twin(config)
    with report.phase("minimize all"):
        x_a, record = assimilate(setup)
    report.convergence["all"] = record
    with report.phase("sensitivity"):
        _, sensitivity = sensitivity_to_observations(setup, setup.scenario, x_a)

    observations = setup.scenario.observations
    mask = pruning_mask(sensitivity)
    subsets = {"high": observations.subset(mask), "low": observations.subset(~mask)}
    write_obs_fields(report, "high_mask", observations, mask.astype(np.float64))

    checkpoint = config.experiment.pruning_checkpoint
    for label, subset in subsets.items():
        with report.phase(f"minimize {label}"):
            _, sub_record = assimilate(setup, setup.scenario.with_observations(subset))
        report.convergence[label] = sub_record
        write_rms(report, f"{label}/", sub_record)
        curve = sub_record.rms[Variable.H.label]
        report.notes[f"{label}_size"] = subset.size
        report.notes[f"{label}_rms_h_at_checkpoint"] = curve[min(checkpoint, len(curve) - 1)]

    report.notes["high_better_at_checkpoint"] = bool(
        report.notes["high_rms_h_at_checkpoint"] <= report.notes["low_rms_h_at_checkpoint"]
    )
    logger.info(
        "pruning: h RMS at iteration %d is %.4e (HIGH) vs %.4e (LOW)",
        checkpoint,
        report.notes["high_rms_h_at_checkpoint"],
        report.notes["low_rms_h_at_checkpoint"],
    )
    report.write_manifest()
    return report


def flag_observations(
    sensitivity: ObsSensitivity,
    count: int,
    sigmas: float = FLAG_SIGMAS,
    candidates: Optional[np.ndarray] = None,
) -> List[Flag]:
    """Per variable, the ``count`` largest ``|sensitivity|`` that also exceed
    ``mean + sigmas * std`` of the remaining observations of that variable.

    ``candidates`` restricts which observations may be flagged; the threshold
    still uses every other observation of the variable.
    """
    observations = sensitivity.observations
    variables = observations.variables()
    cells_i, cells_j = observations.cells()
    magnitude = np.abs(sensitivity.values)
    if candidates is None:
        candidates = np.ones(observations.size, dtype=bool)
    candidates = np.asarray(candidates, dtype=bool)
    if candidates.shape != (observations.size,):
        raise ValueError(f"candidates needs {observations.size} entries, got shape {candidates.shape}")
    flags = []
    for variable in np.unique(variables):
        members = np.flatnonzero(variables == variable)
        order = members[np.argsort(-magnitude[members], kind="stable")]
        top = order[candidates[order]][: max(count, 1)]
        rest = np.setdiff1d(members, top)
        if top.size == 0 or rest.size == 0:
            continue
        threshold = magnitude[rest].mean() + sigmas * magnitude[rest].std()
        for index in top:
            if magnitude[index] > threshold:
                flags.append(Flag(Variable(int(variable)), int(cells_i[index]), int(cells_j[index]), float(sensitivity.values[index])))
    return flags


def run_fault_detection(config: ExperimentConfig) -> ExperimentReport:
    """Inflate observations at the configured cells and look for them in the sensitivity.

    Only observations the inflation moved by more than one error standard
    deviation can be flagged; near-zero values at a fault cell stay clean.
    """
    report = _report(config, "fault_detection")
    faults = config.experiment.fault_locations
    with report.phase("setup"):
        setup = build_twin(config)
        clean = setup.scenario.observations
        corrupted = clean.corrupt(faults, config.experiment.fault_factor)
        scenario = setup.scenario.with_observations(corrupted)
        perturbed = np.abs(corrupted.values - clean.values) > np.sqrt(clean.variances)
    with report.phase("minimize"):
        x_a, record = assimilate(setup, scenario)
    report.convergence["faulty"] = record
    with report.phase("sensitivity"):
        mu, sensitivity = sensitivity_to_observations(setup, scenario, x_a)

    write_field(report, "increment", x_a - scenario.background, setup.grid)
    write_field(report, "supersensitivity", mu.mu, setup.grid)
    write_obs_fields(report, "sensitivity", corrupted, sensitivity.values)

    report.flags = flag_observations(sensitivity, len(faults), candidates=perturbed)
    write_flags(report, report.flags)
    h_cells = {(flag.i, flag.j) for flag in report.flags if flag.variable is Variable.H}
    report.notes["h_flags_match_faults"] = h_cells == set(faults)
    report.notes["flags_within_faults"] = all((flag.i, flag.j) in set(faults) for flag in report.flags)
    report.notes["cg_converged"] = mu.converged
    logger.info("fault detection flagged %d observations: %s", len(report.flags), sorted(h_cells))
    report.write_manifest()
    return report


def _truncation_ranks(rank: int) -> List[int]:
    return sorted({max(1, rank // 8), max(1, rank // 4), max(1, rank // 2), rank})


def run_spectrum_report(config: ExperimentConfig) -> ExperimentReport:
    """Singular value spectrum, dominant directions and (at oracle scale) truncation errors."""
    report = _report(config, "spectrum")
    with report.phase("setup"):
        setup = build_twin(config)
    with report.phase("minimize"):
        x_a, record = assimilate(setup)
    report.convergence["noisy"] = record
    with report.phase("lowrank"):
        impact = compute_lowrank(setup, x_a)

    with report.open_csv("spectrum.csv") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("index", "singular_value"))
        for index, value in enumerate(impact.singulars, start=1):
            writer.writerow((index, format_real(value)))

    observations = setup.scenario.observations
    modes = min(config.lowrank.modes, impact.rank)
    right, left = dominant_directions(impact, modes)
    write_field(report, "dominant_state", right, setup.grid)
    write_obs_fields(report, "dominant_obs", observations, left)
    first_right, first_left = first_directions(impact)
    write_field(report, "first_state", first_right, setup.grid)
    write_obs_fields(report, "first_obs", observations, first_left)
    report.notes["rank"] = impact.rank
    report.notes["flagged"] = impact.flagged

    if setup.grid.n <= DENSE_STATE_CAP:
        with report.phase("truncation"):
            curve = truncation_error_curve(
                setup.scenario,
                x_a,
                _truncation_ranks(config.lowrank.rank),
                algorithm=config.lowrank.algorithm,
                seed=config.lowrank.seed,
                hessvec_method=config.optimizer.hessvec_method,
                n_jobs=config.lowrank.n_jobs,
            )
        with report.open_csv("truncation.csv") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(("rank", "error"))
            for point in curve:
                writer.writerow((point.rank, format_real(point.relative_error)))
    else:
        logger.info("state size %d above the dense cap; skipping the truncation curve", setup.grid.n)

    report.write_manifest()
    return report


def run_impact_report(config: ExperimentConfig) -> ExperimentReport:
    """Analysis response to a unit innovation in one ``h`` observation at the center and a corner."""
    report = _report(config, "impact")
    with report.phase("setup"):
        setup = build_twin(config)
    with report.phase("minimize"):
        x_a, record = assimilate(setup)
    report.convergence["noisy"] = record

    scenario = setup.scenario
    observations = scenario.observations
    final_time = observations.time_indices[-1]
    q = setup.grid.q
    optimizer = config.optimizer
    with report.phase("lowrank"):
        impact = compute_lowrank(setup, x_a)

    times = observations.times()
    variables = observations.variables()
    cells_i, cells_j = observations.cells()
    for label, (i, j) in (("center", (q // 2, q // 2)), ("corner", (0, 0))):
        hit = np.flatnonzero((times == final_time) & (variables == Variable.H) & (cells_i == i) & (cells_j == j))
        if hit.size == 0:
            logger.warning("no h observation at (%d, %d); skipping the %s impact", i, j, label)
            continue
        delta_y = np.zeros(observations.size)
        delta_y[hit[0]] = 1.0
        with report.phase(f"impact {label}"):
            full = obs_impact_apply(
                scenario,
                x_a,
                delta_y,
                tol=optimizer.cg_tol,
                max_iters=optimizer.cg_max_iters,
                hessvec_method=optimizer.hessvec_method,
            )
        write_field(report, f"impact_{label}", full, setup.grid)
        write_field(report, f"impact_{label}_lowrank", lowrank_apply_transpose(impact, delta_y), setup.grid)

    report.write_manifest()
    return report


__all__ = [
    "ExperimentReport",
    "Flag",
    "TwinSetup",
    "assimilate",
    "build_twin",
    "compute_lowrank",
    "flag_observations",
    "pruning_mask",
    "run_assimilation",
    "run_fault_detection",
    "run_impact_report",
    "run_pruning",
    "run_spectrum_report",
    "sensitivity_to_observations",
]
