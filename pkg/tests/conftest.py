import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROTATION = np.array([[-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1], [1, 0, 0, -1]], float)
MAZE_RATES = np.array([
    [-2, 1, 1, 0, 0, 0, 0, 0, 0, 0],
    [.5, -2, .5, 0, 1, 0, 0, 0, 0, 0],
    [.5, .5, -2, 1, 0, 0, 0, 0, 0, 0],
    [0, 0, 1, -2, 0, 0, 0, 0, .5, .5],
    [0, 1, 0, 0, -2, .5, .5, 0, 0, 0],
    [0, 0, 0, 0, .5, -2, 0, .5, 1, 0],
    [0, 0, 0, 0, 1, 0, -2, 1, 0, 0],
    [0, 0, 0, 0, 0, 1, 1, -2, 0, 0],
    [0, 0, 0, .5, 0, 1, 0, 0, -2, .5],
    [0, 0, 0, 1, 0, 0, 0, 0, 1, -2],
], float)
ROVER_RATES = np.array([[-5.0, 5.0], [0.0, 0.0]])
ROVER_GAMMA = np.array([1.0, 12.33])


@pytest.fixture(scope="session")
def tmp_results(tmp_path_factory):
    return tmp_path_factory.mktemp("results")


def make_problem(J, Lambda, K, psi=None, phi=None, gamma=None, speed=1.0,
                 target=None, obstacle=None, **spec):
    """Problem on the unit square; ``K``/``psi``/``phi`` are per-mode callables of (X, Y) or constants."""
    from oopdmp.grid import Grid2D, SpeedField
    from oopdmp.mode_chain import CostBundle, ModeChain
    from oopdmp.solvers import Problem, SolveSpec

    x = np.linspace(0.0, 1.0, J + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")

    def field(v):
        v = v(X, Y) if callable(v) else v
        return np.broadcast_to(np.asarray(v, float), X.shape).copy()

    M = len(K)
    tmask = None if target is None else target(X, Y)
    omask = None if obstacle is None else obstacle(X, Y)
    grid = Grid2D.from_masks(J, omask, tmask)
    costs = CostBundle(
        np.stack([field(k) for k in K]),
        np.stack([field(p) for p in (psi or [0.0] * M)]),
        None if phi is None else np.stack([field(p) for p in phi]),
    )
    return Problem(grid, SpeedField(field(speed), grid), ModeChain(np.asarray(Lambda, float), gamma),
                   costs, SolveSpec(**spec))


SWAP = np.array([[-1.0, 1.0], [1.0, -1.0]])


def disk(c, r):
    return lambda X, Y: np.hypot(X - c[0], Y - c[1]) <= r


def barrier_pair(J=30, **spec):
    """Two modes, each with an expensive block on opposite sides of the direct route."""
    below = lambda X, Y: 1 + 9 * ((X > 0.3) & (X < 0.7) & (Y < 0.5))
    above = lambda X, Y: 1 + 9 * ((X > 0.3) & (X < 0.7) & (Y >= 0.5))
    spec.setdefault("regime", "indefinite")
    return make_problem(J, SWAP, [below, above], None, target=disk((0.9, 0.5), 0.06), **spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
