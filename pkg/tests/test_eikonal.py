import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from oopdmp.eikonal import horizon_bound, solve_breakdown_cost, solve_min_time
from oopdmp.grid import INF, Grid2D, SpeedField, upwind_gradient_norm


def disk_grid(J, c=(0.5, 0.5), r=0.2, obstacle=None):
    x = np.linspace(0, 1, J + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    return Grid2D.from_masks(J, obstacle, np.hypot(X - c[0], Y - c[1]) <= r), X, Y


def smooth_speed(X, Y):
    return 1.0 + 0.5 * (1.0 + np.sin(6 * X) * np.cos(5 * Y))


def graph_times(f, J, sources):
    """8-neighbour shortest paths with edge time = length / harmonic-mean speed."""
    n = J + 1
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, w = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        i0, i1 = 0, n - di
        j0, j1 = max(0, -dj), n - max(0, dj)
        a = idx[i0:i1, j0:j1]
        b = idx[i0 + di:i1 + di, j0 + dj:j1 + dj]
        fa = f[i0:i1, j0:j1]
        fb = f[i0 + di:i1 + di, j0 + dj:j1 + dj]
        rows.append(a.ravel())
        cols.append(b.ravel())
        w.append((np.hypot(di, dj) / J * 0.5 * (1 / fa + 1 / fb)).ravel())
    G = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    d = dijkstra(G.tocsr(), directed=False, indices=np.flatnonzero(sources.ravel()), min_only=True)
    return d.reshape(n, n)


def test_disk_distance_and_first_order():
    errs = []
    for J in (50, 100, 200, 400):
        g, X, Y = disk_grid(J)
        z = solve_min_time(g, SpeedField.constant(g)).values
        exact = np.maximum(0.0, np.hypot(X - 0.5, Y - 0.5) - 0.2)
        errs.append(np.abs(z - exact).max())
        assert errs[-1] <= 2 * g.h
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 1.6) & (ratios <= 2.4))
    order = np.log2(ratios).mean()
    assert abs(order - 1.0) <= 0.4


def test_zero_on_target_boundary():
    g, _, _ = disk_grid(40)
    z = solve_min_time(g, SpeedField.constant(g, 0.7))
    assert np.all(z.values[g.target_boundary] == 0.0)


def test_matches_graph_oracle():
    J = 50
    g, X, Y = disk_grid(J, r=0.1)
    f = smooth_speed(X, Y)
    z = solve_min_time(g, SpeedField(f, g)).values
    d = graph_times(f, J, g.target_boundary)
    assert np.abs(z - d).max() <= 3 * g.h


def test_discrete_residual():
    J = 60
    g, X, Y = disk_grid(J, c=(0.3, 0.6), r=0.12)
    f = smooth_speed(X, Y)
    z = solve_min_time(g, SpeedField(f, g))
    for i, j in zip(*np.nonzero(z.accepted & ~g.target)):
        assert abs(f[i, j] * upwind_gradient_norm(z.values, g, i, j) - 1.0) <= 1e-9


def test_speed_scaling_and_breakdown_cost():
    g, X, Y = disk_grid(50)
    s = SpeedField(smooth_speed(X, Y), g)
    z = solve_min_time(g, s).values
    np.testing.assert_allclose(solve_min_time(g, s.scaled(2.0)).values, z / 2, rtol=1e-12)
    np.testing.assert_allclose(solve_breakdown_cost(g, s.scaled(0.5)).values, 2 * z, rtol=1e-12)
    np.testing.assert_array_equal(solve_breakdown_cost(g, s).values, z)


def test_unreachable_points_get_sentinel():
    J = 40
    obst = np.zeros((J + 1, J + 1), bool)
    obst[20, :] = True  # a wall splitting the domain
    g, _, _ = disk_grid(J, c=(0.8, 0.5), r=0.1, obstacle=obst)
    z = solve_min_time(g, SpeedField.constant(g)).values
    assert np.all(z[:20] == INF)
    assert np.all(z[21:] < INF)


@given(st.integers(0, 2**31))
def test_obstacles_never_shorten(seed):
    rng = np.random.default_rng(seed)
    J = 30
    g0, X, Y = disk_grid(J, c=(0.7, 0.7), r=0.1)
    obst = rng.random((J + 1, J + 1)) < 0.15
    obst &= ~g0.target
    g1 = Grid2D.from_masks(J, obst, g0.target)
    s = SpeedField(smooth_speed(X, Y), g0)
    z0 = solve_min_time(g0, s).values
    z1 = solve_min_time(g1, SpeedField(s.f, g1)).values
    free = ~obst
    assert np.all(z1[free] >= z0[free] - 1e-12)


def test_input_errors():
    g = Grid2D(10)
    with pytest.raises(ValueError, match="empty"):
        solve_min_time(g, SpeedField.constant(g))
    g, _, _ = disk_grid(10)
    with pytest.raises(ValueError):
        solve_min_time(g, np.zeros(g.shape))


def test_horizon_bound_formula():
    g, _, _ = disk_grid(30)
    z = solve_min_time(g, SpeedField.constant(g))
    assert horizon_bound(z, 2.0, 2.0, 0.0) == z.max_finite
    assert horizon_bound(z, 1.0, 4.0, 3.0) == pytest.approx(4 * z.max_finite + 3.0)
    with pytest.raises(ValueError):
        horizon_bound(z, 0.0, 1.0, 0.0)
