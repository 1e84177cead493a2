"""Observation sets: values, selection maps and error variances per observation time.

Observation operators are linear selections of state entries, so a block is
fully described by the flat state indices it observes. Observation vectors
are concatenated over blocks in increasing time order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .covariance import ObsCov
from .grid_state import Grid, Variable


def _frozen(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ObservationBlock:
    """Observations taken at one time index: ``y_k``, ``H_k`` (as indices) and ``diag(R_k)``."""

    time_index: int
    indices: np.ndarray
    values: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        indices = _frozen(self.indices, np.int64)
        values = _frozen(self.values, np.float64)
        variances = _frozen(self.variances, np.float64)
        if indices.ndim != 1 or values.shape != indices.shape or variances.shape != indices.shape:
            raise ValueError("indices, values and variances must be aligned one-dimensional arrays")
        if np.unique(indices).size != indices.size:
            raise ValueError("observation indices must be unique within a time index")
        if np.any(variances <= 0):
            raise ValueError("observation variances must be strictly positive")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def select(self, state: np.ndarray) -> np.ndarray:
        """``H_k x`` for a state (or a batch of states)."""
        return np.asarray(state)[..., self.indices]

    def scatter(self, obs_values: np.ndarray, n: int) -> np.ndarray:
        """``H_k^T w``: place observation-space values into a zero state vector."""
        obs_values = np.asarray(obs_values, dtype=np.float64)
        out = np.zeros(obs_values.shape[:-1] + (n,))
        out[..., self.indices] = obs_values
        return out


@dataclass(frozen=True)
class ObservationSet:
    grid: Grid
    blocks: Tuple[ObservationBlock, ...]

    def __post_init__(self) -> None:
        blocks = tuple(sorted(self.blocks, key=lambda block: block.time_index))
        times = [block.time_index for block in blocks]
        if len(set(times)) != len(times):
            raise ValueError("at most one observation block per time index")
        for block in blocks:
            if block.size and (block.indices.min() < 0 or block.indices.max() >= self.grid.n):
                raise ValueError(f"observation indices at time {block.time_index} fall outside the state")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def full_coverage(
        cls,
        grid: Grid,
        obs_times: Iterable[int],
        variables: Sequence[Variable] = (Variable.H, Variable.U, Variable.V),
    ) -> "ObservationSet":
        """Every listed variable at every cell, with zero values and unit variances."""
        indices = np.concatenate([np.arange(grid.cells) + Variable.parse(v) * grid.cells for v in variables])
        blocks = [
            ObservationBlock(k, indices, np.zeros(indices.size), np.ones(indices.size))
            for k in sorted(set(int(k) for k in obs_times))
        ]
        return cls(grid, tuple(blocks))

    # aggregate views

    @property
    def size(self) -> int:
        return sum(block.size for block in self.blocks)

    @property
    def time_indices(self) -> Tuple[int, ...]:
        return tuple(block.time_index for block in self.blocks)

    @property
    def values(self) -> np.ndarray:
        return self._concat(block.values for block in self.blocks)

    @property
    def variances(self) -> np.ndarray:
        return self._concat(block.variances for block in self.blocks)

    @property
    def indices(self) -> np.ndarray:
        return self._concat((block.indices for block in self.blocks), dtype=np.int64)

    @property
    def obs_cov(self) -> ObsCov:
        return ObsCov(self.variances)

    def times(self) -> np.ndarray:
        """Time index of every observation."""
        return self._concat((np.full(block.size, block.time_index) for block in self.blocks), dtype=np.int64)

    def variables(self) -> np.ndarray:
        """:class:`Variable` code of every observation."""
        return self.indices // self.grid.cells

    def cells(self) -> Tuple[np.ndarray, np.ndarray]:
        """Grid coordinates ``(i, j)`` of every observation."""
        return np.divmod(self.indices % self.grid.cells, self.grid.q)

    @staticmethod
    def _concat(parts: Iterable[np.ndarray], dtype=np.float64) -> np.ndarray:
        parts = list(parts)
        if not parts:
            return np.empty(0, dtype=dtype)
        return np.concatenate(parts).astype(dtype, copy=False)

    # block-wise plumbing

    def offsets(self) -> List[int]:
        return list(np.cumsum([0] + [block.size for block in self.blocks]))

    def split(self, vector: np.ndarray) -> List[np.ndarray]:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape[-1] != self.size:
            raise ValueError(f"expected {self.size} observation values, got {vector.shape[-1]}")
        edges = self.offsets()
        return [vector[..., start:stop] for start, stop in zip(edges[:-1], edges[1:])]

    def scatter_to_state(self, vector: np.ndarray) -> np.ndarray:
        """One state-shaped field per observation time, zero where nothing is observed."""
        parts = self.split(vector)
        if not parts:
            return np.zeros((0, self.grid.n))
        return np.stack([block.scatter(part, self.grid.n) for block, part in zip(self.blocks, parts)])

    # derived sets

    def _rebuild(self, values: np.ndarray, variances: np.ndarray, mask: Optional[np.ndarray] = None) -> "ObservationSet":
        blocks = []
        value_parts = self.split(values)
        variance_parts = self.split(variances)
        mask_parts = self.split(mask.astype(np.float64)) if mask is not None else None
        for position, block in enumerate(self.blocks):
            keep = slice(None) if mask_parts is None else mask_parts[position] > 0.5
            blocks.append(
                ObservationBlock(
                    block.time_index,
                    block.indices[keep],
                    value_parts[position][keep],
                    variance_parts[position][keep],
                )
            )
        return ObservationSet(self.grid, tuple(blocks))

    def with_values(self, values: np.ndarray) -> "ObservationSet":
        return self._rebuild(np.asarray(values, dtype=np.float64), self.variances)

    def with_variances(self, variances: np.ndarray) -> "ObservationSet":
        return self._rebuild(self.values, np.asarray(variances, dtype=np.float64))

    def subset(self, mask: np.ndarray) -> "ObservationSet":
        """Keep the observations where the boolean ``mask`` (over the flat ordering) is set."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.size,):
            raise ValueError(f"mask needs {self.size} entries, got shape {mask.shape}")
        return self._rebuild(self.values, self.variances, mask)

    def corrupt(self, cells: Sequence[Tuple[int, int]], factor: float) -> "ObservationSet":
        """Multiply every observation at the given cells by ``factor``, at all times and variables."""
        obs_i, obs_j = self.cells()
        hit = np.zeros(self.size, dtype=bool)
        for i, j in cells:
            if not (0 <= i < self.grid.q and 0 <= j < self.grid.q):
                raise ValueError(f"fault cell ({i}, {j}) outside a {self.grid.q}x{self.grid.q} grid")
            hit |= (obs_i == i) & (obs_j == j)
        values = self.values.copy()
        values[hit] *= factor
        return self.with_values(values)


__all__ = ["ObservationBlock", "ObservationSet"]
