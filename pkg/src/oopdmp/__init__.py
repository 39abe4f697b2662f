"""Optimal control of occasionally observed mode-switching systems on a 2-D grid."""
from .grid import INF, Grid2D, SpeedField, cfl_timestep, explicit_update, upwind_gradient_norm
from .mode_chain import (
    CostBundle,
    ModeChain,
    conditioned_belief,
    expected_cost,
    propagate_belief,
    sample_mode_path,
    stationary_distribution,
    theta,
)
from .eikonal import ArrivalField, horizon_bound, solve_breakdown_cost, solve_min_time

__version__ = "0.1.0"
