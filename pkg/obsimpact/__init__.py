"""Observation sensitivity and impact toolkit for 4D-Var on a shallow-water model."""

# Keep package import light-weight; experiments and the CLI are imported on demand.
from .errors import ObsImpactError
from .grid_state import Grid, StateVector, Variable, make_grid
from .swe_dynamics import ModelConfig, fwd_run

__all__ = [
    "Grid",
    "ModelConfig",
    "ObsImpactError",
    "StateVector",
    "Variable",
    "fwd_run",
    "make_grid",
]
