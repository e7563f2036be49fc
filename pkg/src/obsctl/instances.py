"""Built-in instances with known answers.

==================== ==== ===================================================
name                 dim  expectation
==================== ==== ===================================================
tent1d               1    concave tent obstacle; every T_p returns the chord
                          hull through (0, 0), the apex and (1, 0)
twopeak1d            1    two tents; T_p equals the least concave majorant
constant-profile-1d  1    z ≡ 1, F = 0; C_inf = 1 exactly
below-boundary       1    obstacle far below affine data; state is the
                          affine interpolant
bump2d               2    cone bump, F = 0
constant-profile-2d  2    z ≡ 1, F = 0
infeasible1d         1    obstacle above the boundary data; every solve
                          raises InfeasibleObstacle
==================== ==== ===================================================
"""

from __future__ import annotations

import numpy as np

from .grid import BoundaryData, GridFunction, ObstacleInstance, make_grid

NODES_1D = 65
NODES_2D = 17


def _line():
    return make_grid(1, [NODES_1D], [1.0])


def _square():
    return make_grid(2, [NODES_2D, NODES_2D], [1.0, 1.0])


def _tent(x, apex, height, slope):
    return height - slope * np.abs(x - apex)


def tent1d() -> ObstacleInstance:
    g = _line()
    psi = GridFunction.from_callable(g, lambda x: _tent(x, 0.375, 0.3, 1.0))
    return ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), psi)


def twopeak1d() -> ObstacleInstance:
    g = _line()
    psi = GridFunction.from_callable(
        g, lambda x: np.maximum(0.0, np.maximum(_tent(x, 0.3, 0.8, 4.0), _tent(x, 0.7, 0.6, 3.0)))
    )
    return ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), psi)


def constant_profile_1d() -> ObstacleInstance:
    g = _line()
    return ObstacleInstance(g, GridFunction.constant(g, 0.0), BoundaryData.constant(g, 0.0),
                            GridFunction.constant(g, 1.0))


def below_boundary() -> ObstacleInstance:
    g = _line()
    psi = GridFunction.from_callable(g, lambda x: -1.0 - x * (1.0 - x))
    boundary = BoundaryData(g, [0.0, 0.5])
    return ObstacleInstance(g, psi, boundary, GridFunction.constant(g, 0.0))


def bump2d() -> ObstacleInstance:
    g = _square()
    psi = GridFunction.from_callable(
        g, lambda x, y: np.maximum(0.0, 0.6 - 2.0 * np.hypot(x - 0.4, y - 0.55))
    )
    return ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), psi)


def constant_profile_2d() -> ObstacleInstance:
    g = _square()
    return ObstacleInstance(g, GridFunction.constant(g, 0.0), BoundaryData.constant(g, 0.0),
                            GridFunction.constant(g, 1.0))


def infeasible1d() -> ObstacleInstance:
    g = _line()
    psi = GridFunction.constant(g, 0.5)
    return ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), psi)


BUILTINS = {
    "tent1d": tent1d,
    "twopeak1d": twopeak1d,
    "constant-profile-1d": constant_profile_1d,
    "below-boundary": below_boundary,
    "bump2d": bump2d,
    "constant-profile-2d": constant_profile_2d,
    "infeasible1d": infeasible1d,
}

# instances every solver should handle (the infeasible one is for error paths)
SUITE = tuple(name for name in BUILTINS if name != "infeasible1d")


def builtin(name: str) -> ObstacleInstance:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown built-in instance {name!r}; choose from {sorted(BUILTINS)}") from None
