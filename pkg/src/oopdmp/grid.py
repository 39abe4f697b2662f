"""Uniform grid on the unit square, masks, CFL step and the explicit upwind update.

Arrays are indexed ``a[i, j]`` with ``i`` along x and ``j`` along y, so the
gridpoint ``a[i, j]`` sits at ``(i h, j h)``.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

INF = 1e12


@dataclass
class Grid2D:
    J: int
    obstacle: np.ndarray = None
    target_interior: np.ndarray = None
    target_boundary: np.ndarray = None

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("need at least 2 subdivisions per axis")
        shape = (self.J + 1, self.J + 1)
        for name in ("obstacle", "target_interior", "target_boundary"):
            arr = getattr(self, name)
            arr = np.zeros(shape, dtype=bool) if arr is None else np.asarray(arr, dtype=bool)
            if arr.shape != shape:
                raise ValueError(f"{name} mask must have shape {shape}")
            setattr(self, name, arr)
        if np.any(self.target_interior & self.target_boundary):
            raise ValueError("target interior and boundary masks overlap")

    @classmethod
    def from_masks(cls, J, obstacle=None, target=None):
        """Split a filled target mask into interior and boundary (4-neighbour rule)."""
        shape = (J + 1, J + 1)
        obstacle = np.zeros(shape, bool) if obstacle is None else np.asarray(obstacle, bool)
        if target is None:
            return cls(J, obstacle)
        target = np.asarray(target, bool) & ~obstacle
        boundary = target & _has_outside_neighbor(target)
        return cls(J, obstacle, target & ~boundary, boundary)

    @property
    def h(self):
        return 1.0 / self.J

    @property
    def shape(self):
        return (self.J + 1, self.J + 1)

    @property
    def target(self):
        return self.target_interior | self.target_boundary

    @property
    def has_target(self):
        return bool(self.target_boundary.any())

    @property
    def frozen(self):
        """Gridpoints whose value is pinned to the sentinel."""
        return self.obstacle | self.target_interior

    @property
    def active(self):
        return ~self.frozen

    def coords(self):
        x = np.linspace(0.0, 1.0, self.J + 1)
        return np.meshgrid(x, x, indexing="ij")


def _has_outside_neighbor(mask):
    out = np.zeros_like(mask)
    out[1:, :] |= ~mask[:-1, :]
    out[:-1, :] |= ~mask[1:, :]
    out[:, 1:] |= ~mask[:, :-1]
    out[:, :-1] |= ~mask[:, 1:]
    return out


@dataclass
class SpeedField:
    f: np.ndarray
    grid: Grid2D = None

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        free = self.f if self.grid is None else self.f[~self.grid.obstacle]
        if free.size == 0:
            raise ValueError("speed field has no free gridpoints")
        if not np.all(np.isfinite(self.f)):
            raise ValueError("speed must be finite")
        self.f_max = float(free.max())
        self.f_min = float(free.min())
        if self.f_min <= 0:
            raise ValueError("speed must be positive outside obstacles")

    @classmethod
    def constant(cls, grid, value=1.0):
        return cls(np.full(grid.shape, float(value)), grid)

    def scaled(self, c):
        return SpeedField(self.f * c, self.grid)


def cfl_timestep(grid, speed, t_end, extra_rate=0.0):
    """Uniform step ``dt = t_end / N`` satisfying the CFL bound and ``dt * extra_rate <= 1``."""
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    f_max = speed.f_max if isinstance(speed, SpeedField) else float(speed)
    if f_max <= 0:
        raise ValueError("maximum speed must be positive")
    dt_max = 1.0 / (math.sqrt(2.0) * f_max / grid.h + extra_rate)
    N = max(1, math.ceil(t_end / dt_max - 1e-9))
    dt = t_end / N
    if abs(dt - dt_max) <= 1e-12 * dt_max:
        dt = dt_max
    return dt, N


def upwind_gradient_norm(V, grid, i, j, inf=INF):
    """``sqrt(Dx^2 + Dy^2)`` with ``Dx = min(D+x, -D-x, 0)``; off-grid and obstacle neighbours count as ``inf``."""
    J = grid.J
    v = V[i, j]

    def nb(a, b):
        if 0 <= a <= J and 0 <= b <= J and not grid.obstacle[a, b]:
            return V[a, b]
        return inf

    dx = min(nb(i + 1, j) - v, nb(i - 1, j) - v, 0.0) / grid.h
    dy = min(nb(i, j + 1) - v, nb(i, j - 1) - v, 0.0) / grid.h
    return math.sqrt(dx * dx + dy * dy)


def explicit_update(slice_k, grid, speed, kbar, dt, zeroth=None, inf=INF):
    """One backward step ``V + dt (kbar - f |grad V|) [+ dt rate (reward - V)]``.

    Obstacle and target-interior points keep the sentinel; results are clamped
    to ``inf``.
    """
    V = np.ascontiguousarray(slice_k, dtype=float)
    f = speed.f if isinstance(speed, SpeedField) else np.asarray(speed, float)
    kbar = np.broadcast_to(np.asarray(kbar, float), V.shape)
    if zeroth is None:
        rate = np.zeros(V.shape)
        reward = np.zeros(V.shape)
        has_zeroth = False
    else:
        rate = np.broadcast_to(np.asarray(zeroth[0], float), V.shape)
        reward = np.broadcast_to(np.asarray(zeroth[1], float), V.shape)
        has_zeroth = True
    V = np.where(grid.frozen, inf, V)
    out = np.empty_like(V)
    kernels.update_step(
        V, out, np.ascontiguousarray(kbar), np.ascontiguousarray(f), dt, grid.h,
        np.ascontiguousarray(grid.active), has_zeroth,
        np.ascontiguousarray(rate), np.ascontiguousarray(reward), inf,
    )
    return out
