"""Pure-numpy kernel backend.

Mirrors the compiled backend in ``_native.pyx`` function for function; the
two must stay behaviourally identical (the compiled module is an optimization,
not a semantic change). Grid cells are flattened as ``(ix * ny + iy) * nz + iz``
and points are stored CSR-style: ``points[cell_start[c]:cell_start[c + 1]]``
holds the points of cell ``c``.
"""

import numpy as np

BACKEND_NAME = "python"

# Query batching keeps the ragged candidate gathers below ~48 MB.
_CANDIDATE_BUDGET = 2_000_000


def trilerp(field, pts):
    """Trilinear interpolation of a node grid at fractional grid coordinates.

    field: (nx, ny, nz) or (nx, ny, nz, C) float64, values at grid nodes.
    pts:   (N, 3) float64 grid coordinates; clamped to the grid border.
    Returns (N,) or (N, C).
    """
    field = np.asarray(field, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    nx, ny, nz = field.shape[:3]
    i0, j0, k0, fx, fy, fz = _corner_setup(pts, nx, ny, nz)
    multi = field.ndim == 4
    if multi:
        out = np.zeros((pts.shape[0], field.shape[3]), dtype=np.float64)
    else:
        out = np.zeros(pts.shape[0], dtype=np.float64)
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                vals = field[i0 + dx, j0 + dy, k0 + dz]
                out += (w[:, None] * vals) if multi else w * vals
    return out


def trilerp_scatter(shape, pts, grad):
    """Adjoint of :func:`trilerp`: scatter-add output gradients to grid nodes.

    shape: grid shape, (nx, ny, nz) or (nx, ny, nz, C).
    grad:  (N,) or (N, C) gradients w.r.t. the interpolated values.
    Returns an array of ``shape`` with d(sum(grad * out))/d(field).
    """
    pts = np.asarray(pts, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    nx, ny, nz = shape[:3]
    i0, j0, k0, fx, fy, fz = _corner_setup(pts, nx, ny, nz)
    multi = len(shape) == 4
    nch = shape[3] if multi else 1
    flat = np.zeros(nx * ny * nz * nch, dtype=np.float64)
    base = (i0 * ny + j0) * nz + k0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                idx = base + (dx * ny + dy) * nz + dz
                if multi:
                    for c in range(nch):
                        flat += np.bincount(idx * nch + c, weights=w * grad[:, c],
                                            minlength=flat.size)
                else:
                    flat += np.bincount(idx, weights=w * grad, minlength=flat.size)
    return flat.reshape(shape)


def _corner_setup(pts, nx, ny, nz):
    i0 = np.clip(np.floor(pts[:, 0]).astype(np.int64), 0, nx - 2)
    j0 = np.clip(np.floor(pts[:, 1]).astype(np.int64), 0, ny - 2)
    k0 = np.clip(np.floor(pts[:, 2]).astype(np.int64), 0, nz - 2)
    fx = np.clip(pts[:, 0] - i0, 0.0, 1.0)
    fy = np.clip(pts[:, 1] - j0, 0.0, 1.0)
    fz = np.clip(pts[:, 2] - k0, 0.0, 1.0)
    return i0, j0, k0, fx, fy, fz


def ball_counts(points, cell_start, dims, origin, cell_size, queries, radius, reach):
    """Count indexed points within ``radius`` of each query.

    Scans the (2*reach+1)^3 cell block around each query's cell; ``reach``
    must satisfy ``reach * cell_size >= radius`` for exact counts.
    Returns (N,) int64.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    nxc, nyc, nzc = (int(d) for d in dims)
    counts = np.zeros(queries.shape[0], dtype=np.int64)
    if points.shape[0] == 0 or queries.shape[0] == 0:
        return counts
    r2 = radius * radius
    qcell = np.floor((queries - origin) / cell_size).astype(np.int64)
    per_cell = max(1, points.shape[0] // max(1, nxc * nyc * nzc))
    batch = max(64, _CANDIDATE_BUDGET // max(1, per_cell * (2 * reach + 1) ** 3))
    for lo in range(0, queries.shape[0], batch):
        hi = min(lo + batch, queries.shape[0])
        q = queries[lo:hi]
        qc = qcell[lo:hi]
        sub = np.zeros(hi - lo, dtype=np.int64)
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    cx = qc[:, 0] + dx
                    cy = qc[:, 1] + dy
                    cz = qc[:, 2] + dz
                    ok = ((cx >= 0) & (cx < nxc) & (cy >= 0) & (cy < nyc)
                          & (cz >= 0) & (cz < nzc))
                    if not ok.any():
                        continue
                    rows = np.nonzero(ok)[0]
                    flat = (cx[rows] * nyc + cy[rows]) * nzc + cz[rows]
                    start = cell_start[flat]
                    num = cell_start[flat + 1] - start
                    if num.sum() == 0:
                        continue
                    qrow, pidx = _ragged_indices(rows, start, num)
                    d = points[pidx] - q[qrow]
                    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
                    inside = d2 <= r2
                    if inside.any():
                        sub += np.bincount(qrow[inside], minlength=hi - lo)
        counts[lo:hi] = sub
    return counts


def nn_dist(points, cell_start, dims, origin, cell_size, queries):
    """Exact Euclidean nearest-neighbor distance from each query to the index.

    Expanding Chebyshev-shell search: shell L is scanned, then the query is
    settled once its best distance cannot be beaten by any unscanned cell.
    Returns (N,) float64 (inf when the index is empty).
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    nxc, nyc, nzc = (int(d) for d in dims)
    nq = queries.shape[0]
    best = np.full(nq, np.inf)
    if points.shape[0] == 0 or nq == 0:
        return best
    ndims = np.array([nxc, nyc, nzc], dtype=np.int64)
    # The walk center is clamped into the grid: queries outside the bounds
    # get a negative margin (no early stop) and fall back to a full scan,
    # which keeps the result exact while bounding the walk by the grid size.
    qcell = np.clip(np.floor((queries - origin) / cell_size).astype(np.int64),
                    0, ndims - 1)
    active = np.arange(nq)
    level = 0
    max_level = int(np.maximum(qcell, ndims - 1 - qcell).max()) + 1
    while active.size and level <= max_level:
        qc = qcell[active]
        for off in _shell_offsets(level):
            cx = qc[:, 0] + off[0]
            cy = qc[:, 1] + off[1]
            cz = qc[:, 2] + off[2]
            ok = ((cx >= 0) & (cx < nxc) & (cy >= 0) & (cy < nyc)
                  & (cz >= 0) & (cz < nzc))
            if not ok.any():
                continue
            rows = np.nonzero(ok)[0]
            flat = (cx[rows] * nyc + cy[rows]) * nzc + cz[rows]
            start = cell_start[flat]
            num = cell_start[flat + 1] - start
            if num.sum() == 0:
                continue
            qrow, pidx = _ragged_indices(rows, start, num)
            d = points[pidx] - queries[active][qrow]
            d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
            np.minimum.at(best, active[qrow], np.sqrt(d2))
        # Unscanned cells lie outside the block [qc - L, qc + L]; a query is
        # settled when its best hit is closer than the block boundary.
        block_lo = origin + (qc - level) * cell_size
        block_hi = origin + (qc + level + 1) * cell_size
        margin = np.minimum((queries[active] - block_lo).min(axis=1),
                            (block_hi - queries[active]).min(axis=1))
        covers = ((qc - level <= 0).all(axis=1)
                  & (qc + level >= np.array([nxc, nyc, nzc]) - 1).all(axis=1))
        done = (best[active] <= margin) | covers
        active = active[~done]
        level += 1
    return best


def _shell_offsets(level):
    """Integer offsets at Chebyshev distance exactly ``level``."""
    if level == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = np.arange(-level, level + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.abs(grid).max(axis=1) == level]


def _ragged_indices(rows, start, num):
    """Expand per-row (start, count) ranges into flat gather indices."""
    total = int(num.sum())
    qrow = np.repeat(rows, num)
    csum = np.concatenate(([0], np.cumsum(num)[:-1]))
    pidx = np.repeat(start - csum, num) + np.arange(total)
    return qrow, pidx
