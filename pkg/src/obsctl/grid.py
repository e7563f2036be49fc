"""Uniform tensor grids on intervals and rectangles, nodal functions and
boundary data.

Nodes are numbered with axis 0 fastest: in 2D the flat index of node
``(i, j)`` is ``i + nx * j``.  Shaped views therefore use Fortran order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

INF = math.inf


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    dimension: int
    nodes_per_axis: tuple[int, ...]
    extent: tuple[float, ...]
    spacing: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise GridError(f"dimension must be 1 or 2, got {self.dimension}")
        if len(self.nodes_per_axis) != self.dimension or len(self.extent) != self.dimension:
            raise GridError("nodes_per_axis and extent must have one entry per axis")
        for n in self.nodes_per_axis:
            if int(n) != n or n < 3:
                raise GridError(f"need at least 3 nodes per axis, got {n}")
        for e in self.extent:
            if not (e > 0 and math.isfinite(e)):
                raise GridError(f"extent must be positive and finite, got {e}")
        object.__setattr__(self, "nodes_per_axis", tuple(int(n) for n in self.nodes_per_axis))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(
            self, "spacing", tuple(e / (n - 1) for e, n in zip(self.extent, self.nodes_per_axis))
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def reshape(self, values: np.ndarray) -> np.ndarray:
        """Shaped view of flat nodal values, indexed ``[i]`` or ``[i, j]``."""
        return np.asarray(values).reshape(self.shape, order="F")

    def flatten(self, array: np.ndarray) -> np.ndarray:
        return np.asarray(array).ravel(order="F")

    def axes(self) -> list[np.ndarray]:
        return [np.arange(n) * h for n, h in zip(self.nodes_per_axis, self.spacing)]

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, dimension)`` in node order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([self.flatten(m) for m in mesh], axis=1)

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        if self.dimension == 1:
            mask[[0, -1]] = True
        else:
            mask[[0, -1], :] = True
            mask[:, [0, -1]] = True
        return self.flatten(mask)

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    def nodal_volume(self) -> np.ndarray:
        """Trapezoidal quadrature weights; they sum to the domain volume."""
        weights = [np.full(n, h) for n, h in zip(self.nodes_per_axis, self.spacing)]
        for w in weights:
            w[[0, -1]] *= 0.5
        if self.dimension == 1:
            return weights[0].copy()
        return self.flatten(np.outer(weights[0], weights[1]))

    def header(self) -> str:
        parts = [str(self.dimension), *map(str, self.nodes_per_axis), *(repr(h) for h in self.spacing)]
        return "# " + ",".join(parts)


def make_grid(dimension: int, nodes_per_axis: Sequence[int], extent: Sequence[float]) -> Grid:
    return Grid(int(dimension), tuple(nodes_per_axis), tuple(extent))


def _frozen(values, size: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).ravel()
    if arr.size != size:
        raise GridError(f"{what}: expected {size} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise GridError(f"{what}: values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.n_nodes, "GridFunction"))

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> GridFunction:
        coords = grid.coordinates()
        return cls(grid, np.broadcast_to(fn(*coords.T), (grid.n_nodes,)))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> GridFunction:
        return cls(grid, np.full(grid.n_nodes, float(c)))

    @property
    def array(self) -> np.ndarray:
        return self.grid.reshape(self.values)

    def with_values(self, values) -> GridFunction:
        return GridFunction(self.grid, values)

    def boundary(self) -> BoundaryData:
        return BoundaryData(self.grid, self.values[self.grid.boundary_mask])

    def __repr__(self):
        return f"GridFunction(grid={self.grid!r}, values=<{self.values.size} floats>)"


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Values on the boundary nodes, in increasing node-index order."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        size = int(self.grid.boundary_mask.sum())
        object.__setattr__(self, "values", _frozen(self.values, size, "BoundaryData"))

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> BoundaryData:
        return GridFunction.from_callable(grid, fn).boundary()

    @classmethod
    def constant(cls, grid: Grid, c: float) -> BoundaryData:
        return cls(grid, np.full(int(grid.boundary_mask.sum()), float(c)))

    def lipschitz_estimate(self) -> float:
        """Largest slope between adjacent boundary nodes."""
        full = self.grid.reshape(embed_boundary(self, 0.0).values)
        if self.grid.dimension == 1:
            return abs(full[-1] - full[0]) / self.grid.extent[0]
        hx, hy = self.grid.spacing
        slopes = [
            np.abs(np.diff(full[:, 0])) / hx,
            np.abs(np.diff(full[:, -1])) / hx,
            np.abs(np.diff(full[0, :])) / hy,
            np.abs(np.diff(full[-1, :])) / hy,
        ]
        return float(max(s.max() for s in slopes))

    def __repr__(self):
        return f"BoundaryData(grid={self.grid!r}, values=<{self.values.size} floats>)"


def _same_grid(a: Grid, b: Grid):
    if a != b:
        raise GridError("grid mismatch")


def embed_boundary(g: BoundaryData, fill: float) -> GridFunction:
    values = np.full(g.grid.n_nodes, float(fill))
    values[g.grid.boundary_mask] = g.values
    return GridFunction(g.grid, values)


def pointwise_max(a: GridFunction, b: GridFunction) -> GridFunction:
    _same_grid(a.grid, b.grid)
    return GridFunction(a.grid, np.maximum(a.values, b.values))


def pointwise_min(a: GridFunction, b: GridFunction) -> GridFunction:
    _same_grid(a.grid, b.grid)
    return GridFunction(a.grid, np.minimum(a.values, b.values))


def interpolate_boundary(g: BoundaryData) -> GridFunction:
    """Affine (1D) or transfinite bilinear (2D) extension of boundary data.

    Both reproduce ``g`` exactly on the boundary and are discretely harmonic
    for affine/bilinear data.
    """
    grid = g.grid
    full = grid.reshape(embed_boundary(g, 0.0).values).copy()
    if grid.dimension == 1:
        s = np.linspace(0.0, 1.0, grid.shape[0])
        return GridFunction(grid, (1 - s) * full[0] + s * full[-1])
    s = np.linspace(0.0, 1.0, grid.shape[0])[:, None]
    t = np.linspace(0.0, 1.0, grid.shape[1])[None, :]
    west, east = full[0, :][None, :], full[-1, :][None, :]
    south, north = full[:, 0][:, None], full[:, -1][:, None]
    coons = (
        (1 - s) * west + s * east + (1 - t) * south + t * north
        - ((1 - s) * (1 - t) * full[0, 0] + s * (1 - t) * full[-1, 0]
           + (1 - s) * t * full[0, -1] + s * t * full[-1, -1])
    )
    values = grid.flatten(coons)
    values[grid.boundary_mask] = g.values
    return GridFunction(grid, values)


def sup_distance(a: GridFunction, b: GridFunction) -> float:
    _same_grid(a.grid, b.grid)
    return float(np.max(np.abs(a.values - b.values)))


@dataclass(frozen=True, eq=False)
class ObstacleInstance:
    grid: Grid
    obstacle: GridFunction
    boundary: BoundaryData
    profile: GridFunction | None = None
    p: float = 2.0

    def __post_init__(self):
        for part in (self.obstacle, self.boundary, self.profile):
            if part is not None:
                _same_grid(self.grid, part.grid)
        p = float(self.p)
        if not (p > 1.0):
            raise GridError(f"exponent p must be > 1 or inf, got {self.p}")
        object.__setattr__(self, "p", p)

    def is_feasible(self) -> bool:
        return bool(np.all(self.obstacle.values[self.grid.boundary_mask] <= self.boundary.values))

    def with_p(self, p: float) -> ObstacleInstance:
        return ObstacleInstance(self.grid, self.obstacle, self.boundary, self.profile, p)

    def with_obstacle(self, obstacle: GridFunction) -> ObstacleInstance:
        return ObstacleInstance(self.grid, obstacle, self.boundary, self.profile, self.p)


def write_csv(u: GridFunction, path) -> None:
    lines = [u.grid.header()] + [f"{v:.17g}" for v in u.values]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> GridFunction:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise GridError(f"{path}: missing '# dim,...' header")
        fields = header[1:].strip().split(",")
        dim = int(fields[0])
        nodes = [int(f) for f in fields[1:1 + dim]]
        spacing = [float(f) for f in fields[1 + dim:1 + 2 * dim]]
        values = np.loadtxt(fh, dtype=np.float64, ndmin=1)
    grid = make_grid(dim, nodes, [h * (n - 1) for h, n in zip(spacing, nodes)])
    return GridFunction(grid, values)
