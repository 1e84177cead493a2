"""Grid geometry, state-vector layout and the field CSV format.

A state on a ``q x q`` periodic grid holds the primitive variables ``h``,
``u`` and ``v``. The flat layout is variable-major (all ``h``, then all
``u``, then all ``v``) and row-major within each field, with the first field
axis ``i`` running along ``x`` and the second axis ``j`` along ``y``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import FieldFormatError

CSV_HEADER = ("x", "y", "h", "u", "v")


class Variable(enum.IntEnum):
    H = 0
    U = 1
    V = 2

    @classmethod
    def parse(cls, value: "Variable | str | int") -> "Variable":
        if isinstance(value, Variable):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown variable {value!r}; expected one of h, u, v") from None
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Grid:
    """Square, periodic, cell-centered grid."""

    q: int
    domain_min: float
    domain_max: float

    def __post_init__(self) -> None:
        if self.q < 3:
            raise ValueError("grid needs at least 3 points per axis")
        if not self.domain_max > self.domain_min:
            raise ValueError("domain_max must be greater than domain_min")

    @property
    def dx(self) -> float:
        return (self.domain_max - self.domain_min) / self.q

    @property
    def dy(self) -> float:
        return self.dx

    @property
    def cells(self) -> int:
        return self.q * self.q

    @property
    def n(self) -> int:
        """Number of state variables, ``3 q^2``."""
        return 3 * self.cells

    def cell_centers(self) -> np.ndarray:
        return self.domain_min + (np.arange(self.q) + 0.5) * self.dx

    def state_index(self, variable: "Variable | str | int", i: int, j: int) -> int:
        return state_index(self, variable, i, j)

    def unravel(self, index: int) -> Tuple[Variable, int, int]:
        """Inverse of :meth:`state_index`."""
        if not 0 <= index < self.n:
            raise IndexError(f"flat index {index} outside [0, {self.n})")
        variable, cell = divmod(int(index), self.cells)
        i, j = divmod(cell, self.q)
        return Variable(variable), i, j

    def split(self, values: np.ndarray) -> np.ndarray:
        """View a flat (or batched flat) vector as ``(..., 3, q, q)`` fields."""
        values = np.asarray(values)
        if values.shape[-1] != self.n:
            raise ValueError(f"expected trailing dimension {self.n}, got {values.shape[-1]}")
        return values.reshape(values.shape[:-1] + (3, self.q, self.q))

    def variable_slice(self, variable: "Variable | str | int") -> slice:
        offset = Variable.parse(variable) * self.cells
        return slice(offset, offset + self.cells)


def make_grid(q: int, domain_min: float, domain_max: float) -> Grid:
    return Grid(q=int(q), domain_min=float(domain_min), domain_max=float(domain_max))


def state_index(grid: Grid, variable: "Variable | str | int", i: int, j: int) -> int:
    if not (0 <= i < grid.q and 0 <= j < grid.q):
        raise IndexError(f"cell ({i}, {j}) outside a {grid.q}x{grid.q} grid")
    return Variable.parse(variable) * grid.cells + i * grid.q + j


@dataclass(frozen=True)
class FieldSlice:
    """Read-only ``q x q`` view of one variable of a :class:`StateVector`."""

    variable: Variable
    data: np.ndarray


@dataclass(frozen=True)
class StateVector:
    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.grid.n,):
            raise ValueError(f"state needs {self.grid.n} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("state contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_fields(cls, grid: Grid, h: np.ndarray, u: np.ndarray, v: np.ndarray) -> "StateVector":
        stacked = np.stack([np.broadcast_to(f, (grid.q, grid.q)) for f in (h, u, v)])
        return cls(grid, stacked.reshape(-1))

    def field(self, variable: "Variable | str | int") -> FieldSlice:
        variable = Variable.parse(variable)
        return FieldSlice(variable, self.fields()[variable])

    def fields(self) -> np.ndarray:
        return self.grid.split(self.values)

    @property
    def h(self) -> np.ndarray:
        return self.fields()[Variable.H]

    @property
    def u(self) -> np.ndarray:
        return self.fields()[Variable.U]

    @property
    def v(self) -> np.ndarray:
        return self.fields()[Variable.V]

    def is_physical(self) -> bool:
        return bool(np.all(self.h > 0.0))


def format_real(value: float) -> str:
    return f"{value:.17g}"


def _iter_rows(state: StateVector) -> Iterator[Tuple[str, ...]]:
    centers = state.grid.cell_centers()
    h, u, v = state.fields()
    for i in range(state.grid.q):
        for j in range(state.grid.q):
            yield tuple(
                format_real(value)
                for value in (centers[i], centers[j], h[i, j], u[i, j], v[i, j])
            )


def encode_field_csv(state: StateVector) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(_iter_rows(state))
    return buffer.getvalue()


def decode_field_csv(text: str, grid: Optional[Grid] = None) -> StateVector:
    """Parse a field CSV; without ``grid`` the geometry is inferred from the coordinates."""

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FieldFormatError("missing header", row=1) from None
    if tuple(name.strip() for name in header) != CSV_HEADER:
        raise FieldFormatError(f"expected header {','.join(CSV_HEADER)}", row=1)

    rows = []
    for row_number, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise FieldFormatError(
                f"expected {len(CSV_HEADER)} columns, found {len(row)}", row=row_number
            )
        parsed = []
        for column, cell in enumerate(row, start=1):
            try:
                value = float(cell)
            except ValueError:
                raise FieldFormatError(f"cannot parse {cell!r} as a real", row=row_number, column=column) from None
            if not math.isfinite(value):
                raise FieldFormatError("non-finite value", row=row_number, column=column)
            parsed.append(value)
        rows.append(parsed)

    q = math.isqrt(len(rows))
    if q * q != len(rows) or q < 3:
        raise FieldFormatError(f"{len(rows)} data rows do not form a square grid", row=len(rows) + 1)
    table = np.asarray(rows, dtype=np.float64)

    if grid is None:
        grid = _infer_grid(table, q)
    elif grid.q != q:
        raise FieldFormatError(f"expected {grid.cells} data rows, found {len(rows)}", row=len(rows) + 1)

    _check_coordinates(table, grid)
    h, u, v = (table[:, column].reshape(q, q) for column in (2, 3, 4))
    return StateVector.from_fields(grid, h, u, v)


def _infer_grid(table: np.ndarray, q: int) -> Grid:
    """Recover the domain bounds whose cell centers reproduce the x column exactly.

    Shortest decimal renderings of the estimated bounds are tried first; the
    raw estimate is the fallback and is then only checked to a tolerance.
    """
    xs = table[::q, 0]
    spacing = (xs[-1] - xs[0]) / (q - 1)
    if not spacing > 0:
        raise FieldFormatError("x coordinates are not increasing", row=2, column=1)
    low = xs[0] - 0.5 * spacing
    high = low + q * spacing
    for domain_min in _short_renderings(low):
        for domain_max in _short_renderings(high):
            if not domain_max > domain_min:
                continue
            candidate = Grid(q=q, domain_min=domain_min, domain_max=domain_max)
            if np.array_equal(candidate.cell_centers(), xs):
                return candidate
    return Grid(q=q, domain_min=low, domain_max=high)


def _short_renderings(value: float) -> Iterator[float]:
    seen = set()
    for digits in range(1, 18):
        candidate = float(f"{value:.{digits}g}")
        if candidate not in seen:
            seen.add(candidate)
            yield candidate


def _check_coordinates(table: np.ndarray, grid: Grid) -> None:
    centers = grid.cell_centers()
    expected_x = np.repeat(centers, grid.q)
    expected_y = np.tile(centers, grid.q)
    tolerance = 1e-9 * (grid.domain_max - grid.domain_min)
    for column, expected in ((0, expected_x), (1, expected_y)):
        bad = np.flatnonzero(np.abs(table[:, column] - expected) > tolerance)
        if bad.size:
            raise FieldFormatError("coordinate does not match the grid", row=int(bad[0]) + 2, column=column + 1)


__all__ = [
    "CSV_HEADER",
    "FieldSlice",
    "Grid",
    "StateVector",
    "Variable",
    "decode_field_csv",
    "encode_field_csv",
    "format_real",
    "make_grid",
    "state_index",
]
