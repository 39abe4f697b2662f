"""First-arrival solves ``f |grad z| = 1`` with ``z = 0`` on the target boundary.

Fast marching with the usual two-point quadratic update on the 4-neighbour
stencil.  Speed is sampled at gridpoints (no face averaging).
"""
import heapq
import math
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, njit
from .grid import INF, SpeedField


@dataclass
class ArrivalField:
    values: np.ndarray
    accepted: np.ndarray

    @property
    def max_finite(self):
        finite = self.values[self.values < INF]
        return float(finite.max()) if finite.size else 0.0


@njit
def _local_solve(z, accepted, i, j, nx, ny, s, inf):
    a = inf
    if i > 0 and accepted[i - 1, j]:
        a = z[i - 1, j]
    if i + 1 < nx and accepted[i + 1, j] and z[i + 1, j] < a:
        a = z[i + 1, j]
    b = inf
    if j > 0 and accepted[i, j - 1]:
        b = z[i, j - 1]
    if j + 1 < ny and accepted[i, j + 1] and z[i, j + 1] < b:
        b = z[i, j + 1]
    if abs(a - b) >= s:
        return min(a, b) + s
    return 0.5 * (a + b + math.sqrt(2.0 * s * s - (a - b) * (a - b)))


@njit
def _march(f, seeds, blocked, h, inf):
    nx, ny = f.shape
    z = np.full((nx, ny), inf)
    accepted = np.zeros((nx, ny), dtype=np.bool_)
    heap = [(0.0, 0)]
    heap.pop()
    for i in range(nx):
        for j in range(ny):
            if seeds[i, j]:
                z[i, j] = 0.0
                heap.append((0.0, i * ny + j))
    heapq.heapify(heap)
    di = (1, -1, 0, 0)
    dj = (0, 0, 1, -1)
    while len(heap) > 0:
        val, idx = heapq.heappop(heap)
        i = idx // ny
        j = idx - i * ny
        if accepted[i, j]:
            continue
        accepted[i, j] = True
        for d in range(4):
            a = i + di[d]
            b = j + dj[d]
            if a < 0 or a >= nx or b < 0 or b >= ny:
                continue
            if accepted[a, b] or blocked[a, b]:
                continue
            cand = _local_solve(z, accepted, a, b, nx, ny, h / f[a, b], inf)
            if cand < z[a, b]:
                z[a, b] = cand
                heapq.heappush(heap, (cand, a * ny + b))
    return z, accepted


_march_impl = _march if USE_NUMBA else getattr(_march, "py_func", _march)


def solve_min_time(grid, speed):
    """Minimal travel time to the target for every gridpoint."""
    if not grid.target.any():
        raise ValueError("target set is empty")
    f = speed.f if isinstance(speed, SpeedField) else np.asarray(speed, float)
    free = ~grid.obstacle
    if np.any(f[free] <= 0) or not np.all(np.isfinite(f[free])):
        raise ValueError("speed must be positive and finite outside obstacles")
    fs = np.where(free, f, 1.0)
    z, accepted = _march_impl(np.ascontiguousarray(fs, dtype=float), np.ascontiguousarray(grid.target),
                         np.ascontiguousarray(grid.obstacle), grid.h, INF)
    return ArrivalField(z, accepted)


def solve_breakdown_cost(grid, broken_speed):
    """Post-breakdown time to target, the same solve with the reduced speed."""
    return solve_min_time(grid, broken_speed)


def horizon_bound(z, K_min, K_max, psi_max):
    """Upper bound on the optimal time to target: ``max z * K_max / K_min + psi_max / K_min``."""
    if K_min <= 0:
        raise ValueError("horizon bound needs a strictly positive minimal running cost")
    zmax = z.max_finite if isinstance(z, ArrivalField) else float(np.max(z[np.asarray(z) < INF]))
    return zmax * K_max / K_min + psi_max / K_min
