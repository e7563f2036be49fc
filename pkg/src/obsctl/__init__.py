"""Discrete p- and ∞-obstacle problems and optimal control of the obstacle."""

from .control import (
    ControlSolution,
    eval_Hp,
    eval_Jinf,
    eval_Jp,
    fixed_point_residual,
    minimize_Jinf,
    minimize_Jinf_1d_direct,
    minimize_Jp,
)
from .grid import (
    INF,
    BoundaryData,
    Grid,
    GridError,
    GridFunction,
    ObstacleInstance,
    make_grid,
    read_csv,
    write_csv,
)
from .obstacle import (
    CertificateFailure,
    InfeasibleObstacle,
    NonConvergence,
    ObstacleSolution,
    SolverReport,
    apply_T,
    is_p_superharmonic,
    lcm_1d,
    solve_inf_obstacle,
    solve_obstacle,
    solve_p_obstacle,
)

__version__ = "0.1.0"
