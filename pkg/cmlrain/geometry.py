"""
Grid geometry and link ray tracing.

Computes the exact intersection lengths between straight link paths and the
cells of a regular 2-D grid. Cells are indexed (row, col) with rows along y
and columns along x; flat indices are row-major, k = r * W + c.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import sparse

# Crossing parameters closer than this are treated as one (corner hits)
T_DEDUP_TOL = 1e-12


class DegenerateSegmentError(ValueError):
    """Raised for zero-length or non-finite link segments."""
    pass


class SegmentError(ValueError):
    """Raised by batch tracing; carries the index of the failing segment."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"segment {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class GridSpec:
    """
    Regular H x W grid.

    Args:
        height: Number of rows (y direction)
        width: Number of columns (x direction)
        origin: Coordinates of the lower-left corner of cell (0, 0)
        spacing: Cell size (dx, dy)
    """
    height: int
    width: int
    origin: Tuple[float, float] = (-0.5, -0.5)
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValueError("Grid height and width must be at least 1")
        if len(self.origin) != 2 or len(self.spacing) != 2:
            raise ValueError("Origin and spacing must be 2-vectors")
        if not all(np.isfinite(self.origin)):
            raise ValueError("Grid origin must be finite")
        if not all(s > 0 for s in self.spacing):
            raise ValueError("Grid spacing must be positive")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    def cell_centers(self) -> np.ndarray:
        """Return (HW, 2) array of (x, y) cell centres in row-major order."""
        cols = self.origin[0] + (np.arange(self.width) + 0.5) * self.spacing[0]
        rows = self.origin[1] + (np.arange(self.height) + 0.5) * self.spacing[1]
        xx, yy = np.meshgrid(cols, rows)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def extent(self) -> Tuple[float, float, float, float]:
        """Return (x_min, x_max, y_min, y_max)."""
        x0, y0 = self.origin
        return (x0, x0 + self.width * self.spacing[0],
                y0, y0 + self.height * self.spacing[1])

    def diagonal(self) -> float:
        x_min, x_max, y_min, y_max = self.extent()
        return float(np.hypot(x_max - x_min, y_max - y_min))

    def to_index_coords(self, points: np.ndarray) -> np.ndarray:
        """Map (x, y) points to fractional (row, col) index coordinates of cell centres."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        col = (points[:, 0] - self.origin[0]) / self.spacing[0] - 0.5
        row = (points[:, 1] - self.origin[1]) / self.spacing[1] - 0.5
        return np.column_stack([row, col])


@dataclass(frozen=True)
class LinkSegment:
    """Straight link path from start to end, in grid coordinates."""
    start: Tuple[float, float]
    end: Tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "end", tuple(float(v) for v in self.end))

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    @property
    def midpoint(self) -> Tuple[float, float]:
        return (0.5 * (self.start[0] + self.end[0]), 0.5 * (self.start[1] + self.end[1]))

    def reversed(self) -> "LinkSegment":
        return LinkSegment(self.end, self.start)

    def translated(self, offset: Sequence[float]) -> "LinkSegment":
        dx, dy = offset
        return LinkSegment((self.start[0] + dx, self.start[1] + dy),
                           (self.end[0] + dx, self.end[1] + dy))

    def point_at(self, t: np.ndarray) -> np.ndarray:
        """Points s0 + t (s1 - s0) for an array of parameters t."""
        t = np.asarray(t, dtype=float)[:, None]
        s0 = np.asarray(self.start)
        return s0 + t * (np.asarray(self.end) - s0)


@dataclass(frozen=True)
class LinkWeights:
    """
    Sparse intersection lengths of one link with the grid cells.

    Entries are stored as (row, col, value) triplets in traversal order.
    """
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    total_inside: float
    grid_shape: Tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        for name in ("rows", "cols", "values"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def cells(self) -> np.ndarray:
        """Flat row-major cell indices."""
        return self.rows * self.grid_shape[1] + self.cols

    def as_dict(self) -> dict:
        return {(int(r), int(c)): float(v) for r, c, v in zip(self.rows, self.cols, self.values)}

    def to_dense(self, grid: GridSpec = None) -> np.ndarray:
        shape = grid.shape if grid is not None else self.grid_shape
        dense = np.zeros(shape)
        np.add.at(dense, (self.rows, self.cols), self.values)
        return dense


def normalize_coordinates(points, x_ref: float, y_ref: float, dx: float, dy: float) -> np.ndarray:
    """
    Affine change of variables to grid coordinates: ((x - x_ref) / dx, (y - y_ref) / dy).

    Performed once when a topology is loaded; tracing only sees grid coordinates.
    """
    if dx <= 0 or dy <= 0:
        raise ValueError("Coordinate spacing must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.column_stack([(points[:, 0] - x_ref) / dx, (points[:, 1] - y_ref) / dy])


def _check_segment(seg: LinkSegment) -> float:
    coords = np.array(seg.start + seg.end)
    if not np.all(np.isfinite(coords)):
        raise DegenerateSegmentError("Segment coordinates must be finite (got NaN or inf)")
    length = seg.length
    if length <= 0.0:
        raise DegenerateSegmentError("Segment has zero length")
    return length


def _crossing_parameters(start: float, delta: float, lines: np.ndarray) -> np.ndarray:
    if delta == 0.0:
        return np.empty(0)
    t = (lines - start) / delta
    return t[(t > 0.0) & (t < 1.0)]


def trace_segment(grid: GridSpec, seg: LinkSegment) -> LinkWeights:
    """
    Siddon-style tracing of one segment through the grid.

    Collects the parameters t in (0, 1) where the segment crosses vertical and
    horizontal grid lines, adds {0, 1}, sorts, collapses near-duplicates
    (corner crossings) and measures each sub-segment. Sub-segments whose
    midpoint falls outside the grid are dropped.

    Args:
        grid: Grid specification
        seg: Segment in grid coordinates

    Returns:
        LinkWeights with positive lengths in traversal order
    """
    length = _check_segment(seg)
    (x0, y0), (x1, y1) = seg.start, seg.end
    dx, dy = x1 - x0, y1 - y0

    x_lines = grid.origin[0] + np.arange(grid.width + 1) * grid.spacing[0]
    y_lines = grid.origin[1] + np.arange(grid.height + 1) * grid.spacing[1]

    t = np.concatenate([[0.0, 1.0],
                        _crossing_parameters(x0, dx, x_lines),
                        _crossing_parameters(y0, dy, y_lines)])
    t.sort()
    keep = np.concatenate([[True], np.diff(t) > T_DEDUP_TOL])
    t = t[keep]
    if t[-1] != 1.0:
        # the last kept parameter absorbed 1.0; snap it so the span stays [0, 1]
        t[-1] = 1.0

    t_mid = 0.5 * (t[:-1] + t[1:])
    mx = x0 + t_mid * dx
    my = y0 + t_mid * dy
    cols = np.floor((mx - grid.origin[0]) / grid.spacing[0]).astype(int)
    rows = np.floor((my - grid.origin[1]) / grid.spacing[1]).astype(int)
    lengths = length * np.diff(t)

    inside = (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height) & (lengths > 0)
    rows, cols, lengths = rows[inside], cols[inside], lengths[inside]

    return LinkWeights(rows=rows, cols=cols, values=lengths,
                       total_inside=float(lengths.sum()), grid_shape=grid.shape)


def segment_length_inside(grid: GridSpec, seg: LinkSegment) -> float:
    """
    Length of the part of the segment inside the grid rectangle.

    Liang-Barsky clipping, independent of the cell-by-cell tracing.
    """
    length = _check_segment(seg)
    (x0, y0), (x1, y1) = seg.start, seg.end
    x_min, x_max, y_min, y_max = grid.extent()
    t_lo, t_hi = 0.0, 1.0
    for p, q in ((-(x1 - x0), x0 - x_min), (x1 - x0, x_max - x0),
                 (-(y1 - y0), y0 - y_min), (y1 - y0, y_max - y0)):
        if p == 0.0:
            if q < 0.0:
                return 0.0
            continue
        r = q / p
        if p < 0.0:
            t_lo = max(t_lo, r)
        else:
            t_hi = min(t_hi, r)
    return max(0.0, t_hi - t_lo) * length


def build_network_weights(grid: GridSpec, segments: Sequence[LinkSegment]) -> List[LinkWeights]:
    """Trace every segment of a topology, preserving order."""
    weights = []
    for i, seg in enumerate(segments):
        try:
            weights.append(trace_segment(grid, seg))
        except ValueError as exc:
            raise SegmentError(i, exc) from exc
    return weights


def weights_matrix(grid: GridSpec, weights: Sequence[LinkWeights]) -> sparse.csr_matrix:
    """Stack link weights into an (m, HW) CSR matrix."""
    if not weights:
        return sparse.csr_matrix((0, grid.size))
    rows = np.concatenate([np.full(w.nnz, i) for i, w in enumerate(weights)])
    cols = np.concatenate([w.rows * grid.width + w.cols for w in weights])
    vals = np.concatenate([w.values for w in weights])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(weights), grid.size))
