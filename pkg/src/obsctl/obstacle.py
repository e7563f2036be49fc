"""Obstacle-to-solution operators ``T_p`` and ``T_inf`` plus exact oracles."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg

from ._newton import projected_newton
from .grid import (
    INF,
    BoundaryData,
    GridFunction,
    ObstacleInstance,
    embed_boundary,
    interpolate_boundary,
    pointwise_max,
)
from .operators import (
    energy_and_gradient,
    energy_hessian,
    inf_laplacian_residual,
    interior_node_volume,
    local_gradient_scale,
    midrange_of_neighbors,
    neighbor_table,
    normalize_residual,
    normalized_p_residual,
    p_laplacian_residual,
)

P2_TOL = 1e-8
INF_TOL = 1e-8
GENERAL_TOL = 1e-6
SOR_OMEGA = 1.5
CONTACT_FACTOR = 10.0
BRUTE_FORCE_MAX_NODES = 64


class InfeasibleObstacle(ValueError):
    pass


class NonConvergence(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class CertificateFailure(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class SolverReport:
    converged: bool
    iterations: int
    final_residual: float
    complementarity_gap: float
    tolerance_used: float
    wall_time: float
    message: str = ""

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "complementarity_gap": self.complementarity_gap,
            "tolerance_used": self.tolerance_used,
            "wall_time_s": self.wall_time,
        }


@dataclass(frozen=True, eq=False)
class ObstacleSolution:
    state: GridFunction
    report: SolverReport
    contact_set: np.ndarray


def _check_feasible(inst: ObstacleInstance):
    bad = inst.obstacle.values[inst.grid.boundary_mask] > inst.boundary.values
    if np.any(bad):
        node = int(inst.grid.boundary_indices[np.argmax(bad)])
        raise InfeasibleObstacle(f"obstacle exceeds boundary data at boundary node {node}")


def complementarity_gap(u: GridFunction, psi: GridFunction, p: float) -> float:
    """``max |min(-Δ u, u - ψ)|`` over interior nodes, residual normalised."""
    interior = u.grid.interior_indices
    if p == INF:
        r = inf_laplacian_residual(u).values
    else:
        r = normalized_p_residual(u, p).values
    gap = np.minimum(r[interior], u.values[interior] - psi.values[interior])
    return float(np.max(np.abs(gap))) if gap.size else 0.0


def _finish(inst, values, tol, iterations, residual, t0, message, converged=None) -> ObstacleSolution:
    values = values.copy()
    values[inst.grid.boundary_mask] = inst.boundary.values
    state = GridFunction(inst.grid, values)
    gap = complementarity_gap(state, inst.obstacle, inst.p)
    if converged is None:
        converged = residual <= tol
    report = SolverReport(
        converged=bool(converged),
        iterations=int(iterations),
        final_residual=float(residual),
        complementarity_gap=gap,
        tolerance_used=float(tol),
        wall_time=time.perf_counter() - t0,
        message=message,
    )
    contact = values - inst.obstacle.values <= CONTACT_FACTOR * tol
    contact.setflags(write=False)
    solution = ObstacleSolution(state, report, contact)
    if not converged:
        raise NonConvergence(f"obstacle solve did not converge: {message}", solution)
    return solution


def _psor(inst: ObstacleInstance, u: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, int]:
    """Red-black projected SOR for the 2-obstacle problem."""
    grid = inst.grid
    psi = inst.obstacle.values
    nb = neighbor_table(grid)
    interior = grid.interior_indices
    inv_h2 = np.repeat([1.0 / h**2 for h in grid.spacing], 2)
    diag = inv_h2.sum()
    idx = np.stack(np.unravel_index(interior, grid.shape, order="F"), axis=1)
    colors = [interior[idx.sum(axis=1) % 2 == c] for c in (0, 1)]
    rows = [np.flatnonzero(idx.sum(axis=1) % 2 == c) for c in (0, 1)]
    u = u.copy()
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for nodes, r in zip(colors, rows):
            gs = (u[nb[r]] @ inv_h2) / diag
            new = np.maximum(psi[nodes], u[nodes] + SOR_OMEGA * (gs - u[nodes]))
            change = max(change, float(np.max(np.abs(new - u[nodes]), initial=0.0)))
            u[nodes] = new
        if change <= tol:
            return u, sweep
    return u, max_sweeps


def solve_p_obstacle(
    inst: ObstacleInstance,
    tol: float | None = None,
    max_iter: int | None = None,
    initial: GridFunction | None = None,
) -> ObstacleSolution:
    """``T_p(ψ)``: minimise the discrete p-energy over ``{u >= ψ, u = g}``."""
    t0 = time.perf_counter()
    p = inst.p
    if not math.isfinite(p):
        raise ValueError("solve_p_obstacle needs a finite exponent; use solve_inf_obstacle")
    _check_feasible(inst)
    grid = inst.grid
    tol = (P2_TOL if p == 2.0 else GENERAL_TOL) if tol is None else float(tol)
    max_iter = 200 * grid.n_nodes if max_iter is None else int(max_iter)
    interior = grid.interior_indices
    psi = inst.obstacle.values

    if initial is None:
        start = pointwise_max(inst.obstacle, interpolate_boundary(inst.boundary)).values.copy()
    else:
        start = np.maximum(initial.values, psi)
    start[grid.boundary_mask] = inst.boundary.values
    if interior.size == 0:
        return _finish(inst, start, tol, 0, 0.0, t0, "no interior nodes")

    sweeps = 0
    if p == 2.0:
        start, sweeps = _psor(inst, start, tol, max_iter)

    full = start.copy()
    node_vol = interior_node_volume(grid)

    def fun(x):
        full[interior] = x
        # trial points of the line search may overflow; they are then rejected
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = energy_and_gradient(grid, full, p)
        return value / p, grad[interior] / p

    def hess(x):
        full[interior] = x
        h = energy_hessian(grid, full, p, floor=1e-8)
        return h[interior][:, interior] / p

    def residual(x, g):
        full[interior] = x
        scale = local_gradient_scale(grid, full, p)[interior]
        return float(np.max(np.abs(np.minimum(normalize_residual(g / node_vol, scale), x - psi[interior]))))

    result = projected_newton(
        fun, hess, start[interior], psi[interior], residual, tol, max(max_iter - sweeps, 1)
    )
    full[interior] = result.x
    return _finish(inst, full, tol, sweeps + result.iterations, result.residual, t0, result.message)


def _value_iteration_step(grid, psi: np.ndarray, u: np.ndarray, color_sets) -> float:
    change = 0.0
    nb = neighbor_table(grid)
    interior = grid.interior_indices
    for rows in color_sets:
        nodes = interior[rows]
        vals = u[nb[rows]]
        new = np.maximum(psi[nodes], 0.5 * (vals.max(axis=1) + vals.min(axis=1)))
        change = max(change, float(np.max(u[nodes] - new, initial=0.0)))
        u[nodes] = new
    return change


def _policy_polish(inst: ObstacleInstance, u: np.ndarray, rounds: int = 8) -> tuple[np.ndarray | None, int]:
    """Solve the linear system of the current max/min/contact policy exactly.

    Returns an exact fixed point of the value-iteration map, or None.
    """
    grid = inst.grid
    psi = inst.obstacle.values
    interior = grid.interior_indices
    nb = neighbor_table(grid)
    bmask = grid.boundary_mask
    n = grid.n_nodes
    v = u.copy()
    for k in range(1, rounds + 1):
        vals = v[nb]
        mid = 0.5 * (vals.max(axis=1) + vals.min(axis=1))
        contact = psi[interior] >= mid
        hi = vals.argmax(axis=1)
        lo = vals.argmin(axis=1)
        tie = hi == lo
        lo[tie] = (hi[tie] + 1) % nb.shape[1]
        free = ~contact
        rows = [np.flatnonzero(bmask), interior[contact], interior[free], interior[free], interior[free]]
        cols = [np.flatnonzero(bmask), interior[contact], interior[free],
                nb[free, hi[free]], nb[free, lo[free]]]
        data = [np.ones(rows[0].size), np.ones(rows[1].size), np.ones(rows[2].size),
                -0.5 * np.ones(rows[3].size), -0.5 * np.ones(rows[4].size)]
        a = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        rhs = np.zeros(n)
        rhs[bmask] = inst.boundary.values
        rhs[interior[contact]] = psi[interior[contact]]
        try:
            with np.errstate(all="ignore"):
                cand = scipy.sparse.linalg.spsolve(a.tocsc(), rhs)
        except RuntimeError:
            return None, k
        if not np.all(np.isfinite(cand)):
            return None, k
        image = cand.copy()
        image[interior] = np.maximum(psi[interior], midrange_of_neighbors(grid, cand))
        scale = max(1.0, float(np.max(np.abs(cand))))
        if np.max(np.abs(image - cand)) <= 1e-13 * scale:
            return image, k
        v = image
    return None, rounds


def solve_inf_obstacle(
    inst: ObstacleInstance,
    tol: float | None = None,
    max_iter: int | None = None,
    monitor: Callable[[np.ndarray], None] | None = None,
    polish: bool = True,
) -> ObstacleSolution:
    """``T_inf(ψ)``: smallest discrete ∞-superharmonic majorant of ψ.

    Monotone value iteration from the constant supersolution (red-black
    Gauss-Seidel ordering keeps the iterates nonincreasing), followed by an
    exact solve of the limiting max/min policy.  ``monitor`` sees every
    iterate.
    """
    t0 = time.perf_counter()
    _check_feasible(inst)
    grid = inst.grid
    tol = INF_TOL if tol is None else float(tol)
    max_iter = 200 * grid.n_nodes if max_iter is None else int(max_iter)
    psi = inst.obstacle.values
    interior = grid.interior_indices
    top = max(float(psi.max()), float(inst.boundary.values.max()))
    u = embed_boundary(inst.boundary, top).values.copy()
    idx = np.stack(np.unravel_index(interior, grid.shape, order="F"), axis=1)
    color_sets = [np.flatnonzero(idx.sum(axis=1) % 2 == c) for c in (0, 1)]
    if monitor is not None:
        monitor(u.copy())
    change = math.inf
    it = 0
    while it < max_iter:
        it += 1
        change = _value_iteration_step(grid, psi, u, color_sets)
        if monitor is not None:
            monitor(u.copy())
        if change <= tol:
            break
    message = "value iteration converged" if change <= tol else "max iterations"
    if polish and interior.size:
        exact, rounds = _policy_polish(inst, u)
        it += rounds
        # accept only a fixed point that stays below the current iterate
        if exact is not None and np.all(exact <= u + 10 * tol) and np.all(exact >= psi - 1e-12):
            u = exact
            change = _defect(inst, u)
            message += ", policy polished"
            if monitor is not None:
                monitor(u.copy())
    return _finish(inst, u, tol, it, change, t0, message)


def _defect(inst, u: np.ndarray) -> float:
    interior = inst.grid.interior_indices
    image = np.maximum(inst.obstacle.values[interior], midrange_of_neighbors(inst.grid, u))
    return float(np.max(np.abs(image - u[interior]), initial=0.0))


def solve_obstacle(inst: ObstacleInstance, **kwargs) -> ObstacleSolution:
    if inst.p == INF:
        return solve_inf_obstacle(inst, **kwargs)
    return solve_p_obstacle(inst, **kwargs)


def apply_T(psi: GridFunction, p: float, boundary: BoundaryData | None = None, **kwargs) -> GridFunction:
    """``T_p(ψ)`` (or ``T_inf``) with boundary data defaulting to ψ's own."""
    g = psi.boundary() if boundary is None else boundary
    return solve_obstacle(ObstacleInstance(psi.grid, psi, g, None, p), **kwargs).state


@dataclass(frozen=True)
class SuperharmonicCheck:
    ok: bool
    worst_node: int
    worst_residual: float

    def __bool__(self):
        return self.ok


def is_p_superharmonic(u: GridFunction, p: float, tol: float = 0.0) -> SuperharmonicCheck:
    """True iff the p- (or ∞-) residual is >= -tol at every interior node."""
    r = inf_laplacian_residual(u) if p == INF else p_laplacian_residual(u, p)
    interior = u.grid.interior_indices
    vals = r.values[interior]
    k = int(np.argmin(vals))
    return SuperharmonicCheck(bool(vals[k] >= -tol), int(interior[k]), float(vals[k]))


def lcm_1d(psi: GridFunction, g: BoundaryData) -> GridFunction:
    """Least concave majorant of ψ pinned to ``g`` at both endpoints."""
    grid = psi.grid
    if grid.dimension != 1:
        raise ValueError("lcm_1d needs a 1D grid")
    if psi.values[0] > g.values[0] or psi.values[-1] > g.values[1]:
        raise InfeasibleObstacle("obstacle exceeds boundary data at an endpoint")
    x = grid.axes()[0]
    y = psi.values.copy()
    y[0], y[-1] = g.values
    hull: list[int] = []
    for k in range(x.size):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            # drop j when it lies on or below the chord i -> k
            if (y[j] - y[i]) * (x[k] - x[i]) <= (y[k] - y[i]) * (x[j] - x[i]):
                hull.pop()
            else:
                break
        hull.append(k)
    values = np.interp(x, x[hull], y[hull])
    values[hull] = y[hull]
    return GridFunction(grid, values)


def _dense_energy_matrix(inst: ObstacleInstance) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic form of the 2-energy on interior nodes: ``½ uᵀAu - bᵀu``."""
    grid = inst.grid
    h = energy_hessian(grid, np.zeros(grid.n_nodes), 2.0).toarray() / 2.0
    interior, boundary = grid.interior_indices, grid.boundary_indices
    a = h[np.ix_(interior, interior)]
    b = -h[np.ix_(interior, boundary)] @ inst.boundary.values
    return a, b


def _qp_by_enumeration(a: np.ndarray, b: np.ndarray, lower: np.ndarray) -> np.ndarray:
    n = lower.size
    best, best_val = None, math.inf
    for mask in range(1 << n):
        contact = np.array([(mask >> k) & 1 for k in range(n)], dtype=bool)
        free = ~contact
        u = lower.copy()
        if free.any():
            rhs = b[free] - a[np.ix_(free, contact)] @ lower[contact]
            u[free] = np.linalg.solve(a[np.ix_(free, free)], rhs)
        if np.any(u < lower - 1e-12):
            continue
        val = 0.5 * u @ a @ u - b @ u
        if val < best_val - 1e-15:
            best, best_val = u, val
    return best


def _qp_by_active_set(a: np.ndarray, b: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Primal-dual active set iteration; finite for M-matrices."""
    n = lower.size
    contact = np.zeros(n, dtype=bool)
    for _ in range(4 * n + 10):
        free = ~contact
        u = lower.copy()
        if free.any():
            rhs = b[free] - a[np.ix_(free, contact)] @ lower[contact]
            u[free] = np.linalg.solve(a[np.ix_(free, free)], rhs)
        mult = a @ u - b
        new = (mult + (lower - u)) > 0
        if np.array_equal(new, contact):
            return np.maximum(u, lower)
        contact = new
    raise NonConvergence("dense active-set oracle did not settle")


def brute_force_obstacle(inst: ObstacleInstance, tol: float = 1e-10, seed: int = 0, starts: int = 4) -> GridFunction:
    """Dense oracle for tiny instances, independent of the production solvers.

    p = 2: exhaustive contact-set enumeration (up to 14 interior nodes) or a
    dense primal-dual active-set method.  Other p: bound-constrained
    L-BFGS-B from several random feasible starts, best value kept.
    """
    grid = inst.grid
    if grid.n_nodes > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute-force oracle limited to {BRUTE_FORCE_MAX_NODES} nodes")
    if not math.isfinite(inst.p):
        raise ValueError("brute-force oracle needs finite p")
    _check_feasible(inst)
    interior = grid.interior_indices
    lower = inst.obstacle.values[interior]
    out = embed_boundary(inst.boundary, 0.0).values.copy()
    if inst.p == 2.0:
        a, b = _dense_energy_matrix(inst)
        if interior.size <= 14:
            out[interior] = _qp_by_enumeration(a, b, lower)
        else:
            out[interior] = _qp_by_active_set(a, b, lower)
        return GridFunction(grid, out)

    rng = np.random.default_rng(seed)
    full = out.copy()
    p = inst.p

    def fun(x):
        full[interior] = x
        value, grad = energy_and_gradient(grid, full, p)
        return value, grad[interior]

    hi = max(float(lower.max()), float(inst.boundary.values.max()))
    best, best_val = None, math.inf
    for k in range(starts):
        x0 = lower + rng.uniform(0.0, 1.0, lower.size) * (hi - lower) if k else np.maximum(lower, hi)
        res = scipy.optimize.minimize(
            fun, x0, jac=True, method="L-BFGS-B",
            bounds=list(zip(lower, [None] * lower.size)),
            options={"ftol": 1e-15, "gtol": tol / 10, "maxiter": 100000, "maxcor": 30},
        )
        if res.fun < best_val:
            best, best_val = res.x, res.fun
    out[interior] = np.maximum(best, lower)
    return GridFunction(grid, out)
