"""Uniform-grid spatial index over 3D point sets.

A counting-sort layout (points reordered by flattened cell id plus CSR
offsets) backs two exact queries: fixed-radius neighbor counts and nearest
neighbor distances. The heavy loops live in :mod:`mvdu.kernels`.
"""

import math

import numpy as np

from . import kernels
from .errors import EmptyCloudError

# Grids larger than this are rebuilt with a coarser cell (queries then scan a
# wider block); keeps memory bounded for tiny radii over large extents.
_MAX_CELLS = 2_000_000


class GridIndex:
    """Immutable uniform-grid index over a fixed point set."""

    def __init__(self, points, cell_size):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if points.shape[0] == 0:
            raise EmptyCloudError("cannot index an empty point set")
        if not np.isfinite(points).all():
            raise ValueError("points must be finite")
        if not (cell_size > 0 and math.isfinite(cell_size)):
            raise ValueError(f"cell_size must be positive, got {cell_size}")

        self.requested_cell_size = float(cell_size)
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        extent = np.maximum(hi - lo, 1e-12)
        cell = float(cell_size)
        dims = np.floor(extent / cell).astype(np.int64) + 1
        if int(np.prod(dims)) > _MAX_CELLS:
            cell = float(np.max(extent) / round(_MAX_CELLS ** (1 / 3)))
            dims = np.floor(extent / cell).astype(np.int64) + 1

        self.origin = lo
        self.cell_size = cell
        self.dims = dims
        ncells = int(np.prod(dims))

        ix = np.clip(((points - lo) / cell).astype(np.int64), 0, dims - 1)
        flat = (ix[:, 0] * dims[1] + ix[:, 1]) * dims[2] + ix[:, 2]
        order = np.argsort(flat, kind="stable")
        self.points = np.ascontiguousarray(points[order])
        self.source_order = order
        counts = np.bincount(flat, minlength=ncells)
        self.cell_start = np.concatenate(
            ([0], np.cumsum(counts))).astype(np.int64)

    def __len__(self):
        return self.points.shape[0]

    def ball_counts(self, queries, radius):
        """Number of indexed points within ``radius`` of each query point."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if radius < 0 or not math.isfinite(radius):
            raise ValueError(f"radius must be finite and >= 0, got {radius}")
        reach = max(1, math.ceil(radius / self.cell_size))
        return kernels.ball_counts(self.points, self.cell_start, self.dims,
                                   self.origin, self.cell_size, queries,
                                   float(radius), reach)

    def nn_dist(self, queries):
        """Exact Euclidean distance from each query to its nearest indexed point."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        return kernels.nn_dist(self.points, self.cell_start, self.dims,
                               self.origin, self.cell_size, queries)


def default_cell_size(points):
    """Cell size heuristic for NN queries: roughly one point per cell."""
    points = np.asarray(points, dtype=np.float64)
    extent = points.max(axis=0) - points.min(axis=0)
    diag = float(np.linalg.norm(extent))
    if diag <= 0:
        return 1e-6
    return max(diag / max(2.0, points.shape[0] ** (1 / 3)), 1e-9)
