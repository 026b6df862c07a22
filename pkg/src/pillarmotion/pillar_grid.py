"""Bird's-eye-view pillar grids and the pillar motion field.

A pillar is one vertical column cell of a regular ground-plane grid; every
point whose (x, y) falls in the cell belongs to it regardless of height.
Cells are half-open intervals [low, high): a point exactly on an interior
edge belongs to the higher-index cell and a point on the global max edge is
out of range. Grid arrays are indexed [row, col] with rows along y and
columns along x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Extent and resolution of a BEV grid; spans must be whole cell multiples."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            span = hi - lo
            if span <= 0:
                raise ValueError(f"{name} range is empty")
            cells = span / self.cell_size
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
                raise ValueError(f"{name} span is not a whole multiple of cell_size")

    @classmethod
    def default(cls) -> "GridSpec":
        """64 m square grid at 0.25 m cells (256 x 256)."""
        return cls(-32.0, 32.0, -32.0, 32.0, 0.25)

    @property
    def width(self) -> int:
        """Number of cells along x (columns)."""
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def height(self) -> int:
        """Number of cells along y (rows)."""
        return int(round((self.y_max - self.y_min) / self.cell_size))

    def cell_of(self, points):
        """Map points to (rows, cols, in_range); out-of-range entries are -1."""
        pts = np.asarray(points, dtype=float)
        cols = np.floor((pts[:, 0] - self.x_min) / self.cell_size).astype(np.int64)
        rows = np.floor((pts[:, 1] - self.y_min) / self.cell_size).astype(np.int64)
        in_range = (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        rows = np.where(in_range, rows, -1)
        cols = np.where(in_range, cols, -1)
        return rows, cols, in_range

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell center coordinates in meters."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell_size
        cx, cy = np.meshgrid(xs, ys)
        return np.stack([cx, cy], axis=-1)

    def crop(self, points) -> np.ndarray:
        """Keep only points whose (x, y) lies inside the grid footprint."""
        pts = np.asarray(points, dtype=float)
        _, _, in_range = self.cell_of(pts)
        return pts[in_range]


@dataclass(eq=False)
class Pillarization:
    """Point-to-pillar assignment for one cloud on one grid.

    Per-pillar membership is stored in CSR form; within a pillar the point
    indices are in ascending order.
    """

    grid: GridSpec
    rows: np.ndarray       # (N,) pillar row per point, -1 when out of range
    cols: np.ndarray       # (N,)
    in_range: np.ndarray   # (N,) bool
    nonempty: np.ndarray   # (H, W) bool
    _order: np.ndarray = field(repr=False, default=None)
    _starts: np.ndarray = field(repr=False, default=None)

    @property
    def n_points(self) -> int:
        return len(self.rows)

    @property
    def counts(self) -> np.ndarray:
        """(H, W) number of points per pillar."""
        return (self._starts[1:] - self._starts[:-1]).reshape(
            self.grid.height, self.grid.width
        )

    def points_in(self, row: int, col: int) -> np.ndarray:
        """Indices of the points assigned to pillar (row, col), ascending."""
        flat = row * self.grid.width + col
        return self._order[self._starts[flat]:self._starts[flat + 1]]


def pillarize(cloud, grid: GridSpec) -> Pillarization:
    """Partition a point cloud into non-overlapping pillars."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    rows, cols, in_range = grid.cell_of(pts) if len(pts) else (
        np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool))
    n_cells = grid.height * grid.width
    flat = rows[in_range] * grid.width + cols[in_range]
    order = np.nonzero(in_range)[0][np.argsort(flat, kind="stable")]
    counts = np.bincount(flat, minlength=n_cells)
    starts = np.concatenate([[0], np.cumsum(counts)])
    return Pillarization(
        grid=grid,
        rows=rows,
        cols=cols,
        in_range=in_range,
        nonempty=(counts > 0).reshape(grid.height, grid.width),
        _order=order,
        _starts=starts,
    )


@dataclass(eq=False)
class PillarMotionField:
    """H x W grid of 2D displacements (meters over ``horizon`` seconds).

    Empty pillars carry zero motion and are flagged in ``nonempty``.
    """

    grid: GridSpec
    motion: np.ndarray     # (H, W, 2) float
    nonempty: np.ndarray   # (H, W) bool
    horizon: float

    def __post_init__(self):
        self.motion = np.asarray(self.motion, dtype=float)
        self.nonempty = np.asarray(self.nonempty, dtype=bool)
        shape = (self.grid.height, self.grid.width)
        if self.motion.shape != shape + (2,):
            raise ValueError(f"motion must have shape {shape + (2,)}, got {self.motion.shape}")
        if self.nonempty.shape != shape:
            raise ValueError("nonempty mask shape must match the grid")
        if not np.isfinite(self.motion).all():
            raise ValueError("motion entries must be finite")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @classmethod
    def zeros(cls, grid: GridSpec, nonempty=None, horizon: float = 0.5) -> "PillarMotionField":
        shape = (grid.height, grid.width)
        mask = np.zeros(shape, bool) if nonempty is None else np.asarray(nonempty, bool)
        return cls(grid, np.zeros(shape + (2,)), mask, horizon)

    def scaled(self, factor: float) -> "PillarMotionField":
        """Linearly extrapolate displacements to ``factor`` times the horizon."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return PillarMotionField(
            self.grid, self.motion * factor, self.nonempty.copy(), self.horizon * factor
        )


def scatter_motion(field: PillarMotionField, pill: Pillarization, cloud) -> np.ndarray:
    """Per-point 3D motion: each point inherits its pillar's (mx, my), z fixed at 0.

    Out-of-range points get (0, 0, 0); they take no part in any loss.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if pill.n_points != len(pts):
        raise ValueError("pillarization was built from a different cloud")
    if pill.grid != field.grid:
        raise ValueError("pillarization grid does not match the field grid")
    motion = np.zeros((len(pts), 3))
    sel = pill.in_range
    motion[sel, :2] = field.motion[pill.rows[sel], pill.cols[sel]]
    return motion


def apply_motion(cloud, per_point_motion) -> np.ndarray:
    """Displace each point by its own motion vector."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    motion = np.asarray(per_point_motion, dtype=float).reshape(-1, 3)
    if len(pts) != len(motion):
        raise ValueError("cloud and motion lengths differ")
    return pts + motion
