# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend.

Behaviour must match ``_fallback.py`` exactly; corner accumulation order and
distance expressions are kept identical so results agree bitwise. Compiled
without -ffast-math / FMA contraction on purpose.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()

BACKEND_NAME = "native"


def trilerp(field, pts):
    """Trilinear interpolation; see the fallback backend for the contract."""
    field = np.ascontiguousarray(field, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if field.ndim == 3:
        out = np.zeros(pts.shape[0], dtype=np.float64)
        _trilerp_1(field, pts, out)
        return out
    out = np.zeros((pts.shape[0], field.shape[3]), dtype=np.float64)
    _trilerp_c(field, pts, out)
    return out


def trilerp_scatter(shape, pts, grad):
    """Adjoint of trilerp; see the fallback backend for the contract."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    out = np.zeros(shape, dtype=np.float64)
    if len(shape) == 3:
        _scatter_1(out, pts, grad)
    else:
        _scatter_c(out, pts, grad)
    return out


cdef inline void _corner(double x, double y, double z, Py_ssize_t nx,
                         Py_ssize_t ny, Py_ssize_t nz, Py_ssize_t* i0,
                         Py_ssize_t* j0, Py_ssize_t* k0, double* fx,
                         double* fy, double* fz) noexcept nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(x)
    cdef Py_ssize_t j = <Py_ssize_t>floor(y)
    cdef Py_ssize_t k = <Py_ssize_t>floor(z)
    if i < 0: i = 0
    if i > nx - 2: i = nx - 2
    if j < 0: j = 0
    if j > ny - 2: j = ny - 2
    if k < 0: k = 0
    if k > nz - 2: k = nz - 2
    i0[0] = i; j0[0] = j; k0[0] = k
    fx[0] = x - i
    fy[0] = y - j
    fz[0] = z - k
    if fx[0] < 0.0: fx[0] = 0.0
    if fx[0] > 1.0: fx[0] = 1.0
    if fy[0] < 0.0: fy[0] = 0.0
    if fy[0] > 1.0: fy[0] = 1.0
    if fz[0] < 0.0: fz[0] = 0.0
    if fz[0] > 1.0: fz[0] = 1.0


cdef void _trilerp_1(double[:, :, ::1] field, double[:, ::1] pts,
                     double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nx = field.shape[0], ny = field.shape[1], nz = field.shape[2]
    cdef Py_ssize_t p, i0, j0, k0, dx, dy, dz
    cdef double fx, fy, fz, wx, wy, wz, acc
    for p in range(n):
        _corner(pts[p, 0], pts[p, 1], pts[p, 2], nx, ny, nz,
                &i0, &j0, &k0, &fx, &fy, &fz)
        acc = 0.0
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    acc += wx * wy * wz * field[i0 + dx, j0 + dy, k0 + dz]
        out[p] = acc


cdef void _trilerp_c(double[:, :, :, ::1] field, double[:, ::1] pts,
                     double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nx = field.shape[0], ny = field.shape[1], nz = field.shape[2]
    cdef Py_ssize_t nc = field.shape[3]
    cdef Py_ssize_t p, i0, j0, k0, dx, dy, dz, c
    cdef double fx, fy, fz, wx, wy, wz, w
    for p in range(n):
        _corner(pts[p, 0], pts[p, 1], pts[p, 2], nx, ny, nz,
                &i0, &j0, &k0, &fx, &fy, &fz)
        for c in range(nc):
            out[p, c] = 0.0
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    for c in range(nc):
                        out[p, c] += w * field[i0 + dx, j0 + dy, k0 + dz, c]


cdef void _scatter_1(double[:, :, ::1] out, double[:, ::1] pts,
                     double[::1] grad) noexcept nogil:
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1], nz = out.shape[2]
    cdef Py_ssize_t p, i0, j0, k0, dx, dy, dz
    cdef double fx, fy, fz, wx, wy, wz
    for p in range(n):
        _corner(pts[p, 0], pts[p, 1], pts[p, 2], nx, ny, nz,
                &i0, &j0, &k0, &fx, &fy, &fz)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    out[i0 + dx, j0 + dy, k0 + dz] += wx * wy * wz * grad[p]


cdef void _scatter_c(double[:, :, :, ::1] out, double[:, ::1] pts,
                     double[:, ::1] grad) noexcept nogil:
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1], nz = out.shape[2]
    cdef Py_ssize_t nc = out.shape[3]
    cdef Py_ssize_t p, i0, j0, k0, dx, dy, dz, c
    cdef double fx, fy, fz, wx, wy, wz, w
    for p in range(n):
        _corner(pts[p, 0], pts[p, 1], pts[p, 2], nx, ny, nz,
                &i0, &j0, &k0, &fx, &fy, &fz)
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    for c in range(nc):
                        out[i0 + dx, j0 + dy, k0 + dz, c] += w * grad[p, c]


def ball_counts(points, cell_start, dims, origin, cell_size, queries, radius, reach):
    """Fixed-radius neighbor counts; see the fallback backend for the contract."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    cell_start = np.ascontiguousarray(cell_start, dtype=np.int64)
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    counts = np.zeros(queries.shape[0], dtype=np.int64)
    if points.shape[0] == 0 or queries.shape[0] == 0:
        return counts
    _ball_counts(points, cell_start, int(dims[0]), int(dims[1]), int(dims[2]),
                 origin, float(cell_size), queries, float(radius), int(reach),
                 counts)
    return counts


cdef void _ball_counts(double[:, ::1] points, long long[::1] cell_start,
                       Py_ssize_t nxc, Py_ssize_t nyc, Py_ssize_t nzc,
                       double[::1] origin, double cell_size,
                       double[:, ::1] queries, double radius, Py_ssize_t reach,
                       long long[::1] counts) noexcept nogil:
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t q, cx, cy, cz, dx, dy, dz, flat, s, e, i
    cdef double qx, qy, qz, ddx, ddy, ddz, d2
    cdef double r2 = radius * radius
    cdef long long n
    for q in range(nq):
        qx = queries[q, 0]; qy = queries[q, 1]; qz = queries[q, 2]
        cx = <Py_ssize_t>floor((qx - origin[0]) / cell_size)
        cy = <Py_ssize_t>floor((qy - origin[1]) / cell_size)
        cz = <Py_ssize_t>floor((qz - origin[2]) / cell_size)
        n = 0
        for dx in range(cx - reach, cx + reach + 1):
            if dx < 0 or dx >= nxc:
                continue
            for dy in range(cy - reach, cy + reach + 1):
                if dy < 0 or dy >= nyc:
                    continue
                for dz in range(cz - reach, cz + reach + 1):
                    if dz < 0 or dz >= nzc:
                        continue
                    flat = (dx * nyc + dy) * nzc + dz
                    s = cell_start[flat]
                    e = cell_start[flat + 1]
                    for i in range(s, e):
                        ddx = points[i, 0] - qx
                        ddy = points[i, 1] - qy
                        ddz = points[i, 2] - qz
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 <= r2:
                            n += 1
        counts[q] = n


def nn_dist(points, cell_start, dims, origin, cell_size, queries):
    """Exact nearest-neighbor distances; see the fallback backend for the contract."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    cell_start = np.ascontiguousarray(cell_start, dtype=np.int64)
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    out = np.full(queries.shape[0], np.inf, dtype=np.float64)
    if points.shape[0] == 0 or queries.shape[0] == 0:
        return out
    _nn_dist(points, cell_start, int(dims[0]), int(dims[1]), int(dims[2]),
             origin, float(cell_size), queries, out)
    return out


cdef void _nn_dist(double[:, ::1] points, long long[::1] cell_start,
                   Py_ssize_t nxc, Py_ssize_t nyc, Py_ssize_t nzc,
                   double[::1] origin, double cell_size,
                   double[:, ::1] queries, double[::1] out) noexcept nogil:
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t q, cx, cy, cz, level, dx, dy, dz, zlo, zhi, zstep
    cdef Py_ssize_t flat, s, e, i, max_level
    cdef double qx, qy, qz, best, ddx, ddy, ddz, d2, margin, m
    cdef bint covers
    for q in range(nq):
        qx = queries[q, 0]; qy = queries[q, 1]; qz = queries[q, 2]
        # Clamp the walk center into the grid; outside queries then get a
        # negative margin (no early stop) and scan the grid exhaustively,
        # which stays exact and bounds the walk by the grid size.
        cx = <Py_ssize_t>floor((qx - origin[0]) / cell_size)
        cy = <Py_ssize_t>floor((qy - origin[1]) / cell_size)
        cz = <Py_ssize_t>floor((qz - origin[2]) / cell_size)
        if cx < 0: cx = 0
        if cx > nxc - 1: cx = nxc - 1
        if cy < 0: cy = 0
        if cy > nyc - 1: cy = nyc - 1
        if cz < 0: cz = 0
        if cz > nzc - 1: cz = nzc - 1
        best = out[q]
        max_level = _cover_level(cx, nxc)
        if _cover_level(cy, nyc) > max_level: max_level = _cover_level(cy, nyc)
        if _cover_level(cz, nzc) > max_level: max_level = _cover_level(cz, nzc)
        level = 0
        while level <= max_level:
            # Cells with Chebyshev offset exactly == level.
            for dx in range(cx - level, cx + level + 1):
                if dx < 0 or dx >= nxc:
                    continue
                for dy in range(cy - level, cy + level + 1):
                    if dy < 0 or dy >= nyc:
                        continue
                    if dx != cx - level and dx != cx + level and \
                       dy != cy - level and dy != cy + level and level > 0:
                        zstep = 2 * level
                    else:
                        zstep = 1
                    dz = cz - level
                    while dz <= cz + level:
                        if 0 <= dz < nzc:
                            flat = (dx * nyc + dy) * nzc + dz
                            s = cell_start[flat]
                            e = cell_start[flat + 1]
                            for i in range(s, e):
                                ddx = points[i, 0] - qx
                                ddy = points[i, 1] - qy
                                ddz = points[i, 2] - qz
                                d2 = ddx * ddx + ddy * ddy + ddz * ddz
                                d2 = sqrt(d2)
                                if d2 < best:
                                    best = d2
                        dz += zstep
            margin = qx - (origin[0] + (cx - level) * cell_size)
            m = (origin[0] + (cx + level + 1) * cell_size) - qx
            if m < margin: margin = m
            m = qy - (origin[1] + (cy - level) * cell_size)
            if m < margin: margin = m
            m = (origin[1] + (cy + level + 1) * cell_size) - qy
            if m < margin: margin = m
            m = qz - (origin[2] + (cz - level) * cell_size)
            if m < margin: margin = m
            m = (origin[2] + (cz + level + 1) * cell_size) - qz
            if m < margin: margin = m
            covers = (cx - level <= 0 and cx + level >= nxc - 1
                      and cy - level <= 0 and cy + level >= nyc - 1
                      and cz - level <= 0 and cz + level >= nzc - 1)
            if best <= margin or covers:
                break
            level += 1
        out[q] = best


cdef inline Py_ssize_t _cover_level(Py_ssize_t c, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t a = c
    cdef Py_ssize_t b = n - 1 - c
    if b > a:
        a = b
    return a + 1
