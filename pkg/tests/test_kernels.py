"""Backend equivalence and index correctness against brute-force oracles."""

import importlib

import numpy as np
import pytest

from mvdu import kernels
from mvdu.kernels import _fallback
from mvdu.oracles import brute_force_density, brute_force_nn
from mvdu.spatial import GridIndex, default_cell_size

try:
    from mvdu.kernels import _native
except ImportError:
    _native = None

needs_native = pytest.mark.skipif(_native is None,
                                  reason="compiled kernels not built")


def test_ball_counts_match_brute_force(rng):
    pts = rng.uniform(-1, 1, (4000, 3))
    queries = rng.uniform(-1.3, 1.3, (500, 3))
    for radius in (0.05, 0.17, 0.8):
        idx = GridIndex(pts, radius)
        assert np.array_equal(idx.ball_counts(queries, radius),
                              brute_force_density(queries, pts, radius))


def test_nn_matches_brute_force(rng):
    pts = rng.normal(size=(2000, 3))
    queries = rng.normal(scale=3.0, size=(400, 3))
    idx = GridIndex(pts, default_cell_size(pts))
    assert np.allclose(idx.nn_dist(queries), brute_force_nn(queries, pts),
                       atol=0, rtol=0)


def test_nn_far_query_and_tiny_cloud():
    idx = GridIndex(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1e-9]]), 1e-6)
    d = idx.nn_dist(np.array([[3.0, 4.0, 0.0]]))
    assert d[0] == pytest.approx(5.0, rel=1e-12)


def test_clustered_points_with_coarse_and_fine_cells(rng):
    # clusters far apart stress the shell search
    centers = rng.uniform(-5, 5, (6, 3))
    pts = np.concatenate([c + 0.01 * rng.normal(size=(200, 3)) for c in centers])
    queries = rng.uniform(-6, 6, (300, 3))
    for cell in (0.02, 0.5, 3.0):
        idx = GridIndex(pts, cell)
        assert np.allclose(idx.nn_dist(queries), brute_force_nn(queries, pts),
                           atol=0)
        r = 0.75
        assert np.array_equal(idx.ball_counts(queries, r),
                              brute_force_density(queries, pts, r))


@needs_native
def test_backends_bitwise_identical(rng):
    pts = rng.uniform(0, 2, (3000, 3))
    queries = rng.uniform(-0.2, 2.2, (600, 3))
    idx = GridIndex(pts, 0.1)
    args = (idx.points, idx.cell_start, idx.dims, idx.origin, idx.cell_size)
    assert np.array_equal(_native.ball_counts(*args, queries, 0.1, 1),
                          _fallback.ball_counts(*args, queries, 0.1, 1))
    assert np.array_equal(_native.nn_dist(*args, queries),
                          _fallback.nn_dist(*args, queries))

    field = rng.normal(size=(9, 8, 7))
    p = rng.uniform(-0.5, 9.0, (2000, 3))
    assert np.array_equal(_native.trilerp(field, p), _fallback.trilerp(field, p))
    grad = rng.normal(size=2000)
    assert np.allclose(_native.trilerp_scatter(field.shape, p, grad),
                       _fallback.trilerp_scatter(field.shape, p, grad),
                       rtol=0, atol=1e-12)
    cfield = rng.normal(size=(6, 6, 6, 3))
    assert np.array_equal(_native.trilerp(cfield, p), _fallback.trilerp(cfield, p))


def test_trilerp_exact_on_trilinear_function(rng):
    x, y, z = np.meshgrid(np.arange(5), np.arange(6), np.arange(7),
                          indexing="ij")
    field = 1.5 * x - 2.0 * y + 0.25 * z + 3.0
    p = rng.uniform(0, [4, 5, 6], (500, 3))
    vals = kernels.trilerp(field, p)
    expect = 1.5 * p[:, 0] - 2.0 * p[:, 1] + 0.25 * p[:, 2] + 3.0
    assert np.abs(vals - expect).max() < 1e-12


def test_trilerp_scatter_is_adjoint(rng):
    field = rng.normal(size=(7, 7, 7))
    p = rng.uniform(0, 6, (300, 3))
    g = rng.normal(size=300)
    lhs = (kernels.trilerp_scatter(field.shape, p, g) * field).sum()
    rhs = (kernels.trilerp(field, p) * g).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selection_env(monkeypatch):
    monkeypatch.setenv("MVDU_KERNELS", "python")
    import mvdu.kernels as k
    fresh = importlib.reload(k)
    assert fresh.get_backend() == "python"
    monkeypatch.delenv("MVDU_KERNELS")
    importlib.reload(k)
