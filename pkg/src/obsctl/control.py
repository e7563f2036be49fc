"""Optimal control of the obstacle: the functionals J_p, H_p, J_inf and their
minimisation.

A minimiser of J_p can be taken equal to its own state, so instead of the
bilevel problem we minimise

    G_p(ψ) = Σ vol |ψ - z|^p + Σ cellvol |D_h ψ|^p

over discrete p-superharmonic ψ with ψ = F on the boundary; on that cone
J_p = G_p^(1/p).  Wherever the cone is polyhedral (p = 2 in any dimension,
every p in 1D, where p-superharmonic means concave) we write
ψ = ψ_F + G w with w >= 0 the discrete Laplacian residual and G the inverse
Laplacian, and solve a bound-constrained convex problem by projected
Newton.  Otherwise the nonlinear cone constraint goes to SLSQP, followed by one
application of T_p, which maps any control into the cone without
increasing J_p.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from ._newton import projected_newton
from .grid import INF, BoundaryData, GridFunction, ObstacleInstance, embed_boundary
from .obstacle import (
    CertificateFailure,
    InfeasibleObstacle,
    SolverReport,
    apply_T,
    lcm_1d,
    solve_obstacle,
)
from .operators import (
    energy_and_gradient,
    energy_hessian,
    interior_node_volume,
    local_gradient_scale,
    power_mean,
    sup_gradient_norm,
)

CERTIFICATE_TOL = 1e-4
SQP_FTOL = 1e-10
SQP_RESTARTS = 6
SQP_ROUND_ITER = 200
SQP_STALL = 1e-9
DEFAULT_SCHEDULE = (2.0, 4.0, 8.0, 16.0, 32.0)


@dataclass(frozen=True)
class StageRecord:
    p: float
    objective: float
    hp: float
    fixed_point_residual: float
    wall_time: float
    converged: bool


@dataclass(frozen=True, eq=False)
class ControlSolution:
    control: GridFunction
    state: GridFunction
    objective: float
    fixed_point_residual: float
    report: SolverReport
    p: float
    trace: tuple[StageRecord, ...] = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "p": "inf" if self.p == INF else self.p,
            "objective": self.objective,
            "fixed_point_residual": self.fixed_point_residual,
            "converged": self.report.converged,
            "iterations": self.report.iterations,
        }


def _state(psi: GridFunction, p: float, boundary: BoundaryData | None = None) -> GridFunction:
    return apply_T(psi, p, boundary)


def jp_from_state(psi: GridFunction, state: GridFunction, z: GridFunction, p: float) -> float:
    """``[Σ vol |state - z|^p + Σ cellvol |D ψ|^p]^(1/p)`` for a known state."""
    grid = psi.grid
    grads = np.stack([d @ psi.values for d in _diff(grid)], axis=1)
    mags = np.concatenate([np.abs(state.values - z.values), np.sqrt(np.sum(grads**2, axis=1))])
    weights = np.concatenate([grid.nodal_volume(), np.full(grads.shape[0], grid.cell_volume)])
    return power_mean(mags, weights, p)


def _diff(grid):
    from .operators import difference_matrices

    return difference_matrices(grid)


def eval_Jp(psi: GridFunction, z: GridFunction, p: float, boundary: BoundaryData | None = None) -> float:
    return jp_from_state(psi, _state(psi, p, boundary), z, p)


def eval_Hp(psi: GridFunction, z: GridFunction, p: float, boundary: BoundaryData | None = None) -> float:
    state = _state(psi, p, boundary)
    return max(float(np.max(np.abs(state.values - z.values))), sup_gradient_norm(psi))


def eval_Jinf(psi: GridFunction, z: GridFunction, boundary: BoundaryData | None = None) -> float:
    state = _state(psi, INF, boundary)
    return max(float(np.max(np.abs(state.values - z.values))), sup_gradient_norm(psi))


def fixed_point_residual(psi: GridFunction, p: float, boundary: BoundaryData | None = None) -> float:
    """``‖T(ψ) - ψ‖_inf``."""
    return float(np.max(np.abs(_state(psi, p, boundary).values - psi.values)))


class _ConeFunctional:
    """G_p on the scaled problem ``ψ/c``, ``z/c``; values stay O(1)."""

    def __init__(self, z: GridFunction, p: float, scale: float):
        self.grid = z.grid
        self.p = p
        self.scale = scale
        self.z = z.values / scale
        self.vol = self.grid.nodal_volume()

    def value_grad(self, psi: np.ndarray) -> tuple[float, np.ndarray]:
        p = self.p
        e = psi - self.z
        with np.errstate(over="ignore", invalid="ignore"):
            ae = np.abs(e)
            value = float(np.sum(self.vol * ae**p))
            grad = p * self.vol * ae ** (p - 2.0) * e if p != 2.0 else 2.0 * self.vol * e
            ev, eg = energy_and_gradient(self.grid, psi, p)
        grad = np.where(ae > 0, grad, 0.0)
        grad[self.grid.boundary_mask] = 0.0
        return value + ev, grad + eg

    def hessian(self, psi: np.ndarray):
        p = self.p
        ae = np.abs(psi - self.z)
        diag = p * (p - 1.0) * self.vol * (ae ** (p - 2.0) if p != 2.0 else 1.0)
        from scipy.sparse import diags

        return energy_hessian(self.grid, psi, p, floor=1e-8) + diags(diag)


def _problem_scale(z: GridFunction, F: BoundaryData) -> float:
    c = max(float(np.max(np.abs(z.values))), float(np.max(np.abs(F.values))), F.lipschitz_estimate())
    return c if c > 0 else 1.0


def _laplace_parts(grid):
    """Interior block of the 5-point stiffness matrix and the node volume."""
    h = energy_hessian(grid, np.zeros(grid.n_nodes), 2.0).toarray() / 2.0
    return h, interior_node_volume(grid)


def harmonic_extension(F: BoundaryData) -> GridFunction:
    grid = F.grid
    h, _ = _laplace_parts(grid)
    interior, boundary = grid.interior_indices, grid.boundary_indices
    out = embed_boundary(F, 0.0).values.copy()
    out[interior] = np.linalg.solve(h[np.ix_(interior, interior)], -h[np.ix_(interior, boundary)] @ F.values)
    return GridFunction(grid, out)


def _minimize_polyhedral(functional: _ConeFunctional, psi_f: np.ndarray, warm: np.ndarray,
                         tol: float, max_iter: int):
    """Minimise over ψ = ψ_F + G w, w >= 0 (G = inverse discrete Laplacian)."""
    grid = functional.grid
    interior = grid.interior_indices
    h, node_vol = _laplace_parts(grid)
    h_ii = h[np.ix_(interior, interior)]
    green = node_vol * np.linalg.inv(h_ii)
    green = 0.5 * (green + green.T)
    w0 = np.maximum((h[interior] @ warm) / node_vol, 0.0)
    full = psi_f.copy()

    def to_psi(w):
        full[interior] = psi_f[interior] + green @ w
        return full

    def fun(w):
        value, grad = functional.value_grad(to_psi(w))
        return value, green @ grad[interior]

    def hess(w):
        hp = functional.hessian(to_psi(w)).toarray()[np.ix_(interior, interior)]
        return green @ hp @ green

    d0 = np.maximum(np.diag(hess(w0)), 1e-300)

    def residual(w, g):
        step = w - np.maximum(0.0, w - g / d0)
        return float(np.max(np.abs(step))) / max(1.0, float(np.max(np.abs(w))))

    res = projected_newton(fun, hess, w0, np.zeros(interior.size), residual, tol, max_iter)
    return to_psi(res.x).copy(), res


def _minimize_sqp(functional: _ConeFunctional, warm: np.ndarray, tol: float, max_iter: int):
    """SLSQP on the interior values with the p-superharmonic inequalities.

    The objective is divided by its value at the start and each residual by
    the local ``slope^(p-2)`` frozen at the start, which keeps the
    subproblems well scaled for large p.  When SLSQP gives up early the
    scales are refrozen and it restarts from where it stopped.
    """
    grid = functional.grid
    p = functional.p
    interior = grid.interior_indices
    node_vol = interior_node_volume(grid)
    full = warm.copy()
    x = warm[interior].copy()
    iterations = 0
    ok = False
    previous = math.inf
    for _ in range(SQP_RESTARTS):
        full[interior] = x
        slope = max(sup_gradient_norm(GridFunction(grid, full)), 1e-8)
        floor = (1e-3 * slope) ** (p - 2.0)
        frozen = np.maximum(local_gradient_scale(grid, full, p)[interior], floor) * p * node_vol
        f_scale = max(functional.value_grad(full)[0], 1e-300)

        def fun(x):
            full[interior] = x
            value, grad = functional.value_grad(full)
            return value / f_scale, grad[interior] / f_scale

        def cons(x):
            full[interior] = x
            with np.errstate(over="ignore", invalid="ignore"):
                _, eg = energy_and_gradient(grid, full, p)
            return eg[interior] / frozen

        def cons_jac(x):
            full[interior] = x
            h = energy_hessian(grid, full, p)[interior][:, interior]
            return h.toarray() / frozen[:, None]

        with np.errstate(over="ignore", invalid="ignore"):
            res = scipy.optimize.minimize(
                fun, x, jac=True, method="SLSQP",
                constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                options={"maxiter": SQP_ROUND_ITER, "ftol": tol},
            )
        iterations += int(res.nit)
        x = res.x
        full[interior] = x
        current = functional.value_grad(full)[0]
        # a whole round without progress counts as converged as well
        ok = bool(res.success) or abs(previous - current) <= SQP_STALL * current
        previous = current
        if ok or iterations >= max_iter:
            break
    full[interior] = x
    return full.copy(), iterations, ok, float(max(0.0, -cons(x).min()))


def minimize_Jp(
    z: GridFunction,
    F: BoundaryData,
    p: float,
    warm_start: GridFunction | None = None,
    tol: float = 1e-10,
    max_iter: int = 500,
    certificate_tol: float = CERTIFICATE_TOL,
) -> ControlSolution:
    """Minimise J_p over controls with boundary values F."""
    t0 = time.perf_counter()
    if not (p > 1.0 and math.isfinite(p)):
        raise ValueError(f"minimize_Jp needs finite p > 1, got {p}")
    grid = z.grid
    c = _problem_scale(z, F)
    functional = _ConeFunctional(z, p, c)
    psi_f = harmonic_extension(F).values / c
    if warm_start is None:
        warm = psi_f.copy()
    else:
        warm = warm_start.values / c
        warm[grid.boundary_mask] = psi_f[grid.boundary_mask]

    if grid.dimension == 1 or p == 2.0:
        psi, res = _minimize_polyhedral(functional, psi_f, warm, tol, max_iter)
        iterations, opt_ok, opt_res = res.iterations, res.converged, res.residual
    else:
        if warm_start is None:
            # continue from p = 2 by doubling; a cold start lands in poor local minima
            warm, _ = _minimize_polyhedral(_ConeFunctional(z, 2.0, c), psi_f, psi_f, tol, max_iter)
            q = 4.0
            while q < p:
                stage = minimize_Jp(z, F, q, GridFunction(grid, warm * c), tol, max_iter, math.inf)
                warm = stage.control.values / c
                q *= 2.0
        psi, iterations, opt_ok, opt_res = _minimize_sqp(functional, warm, SQP_FTOL, max_iter)
        psi[grid.boundary_mask] = psi_f[grid.boundary_mask]
        psi = apply_T(GridFunction(grid, psi * c), p).values / c

    control = GridFunction(grid, psi * c)
    sol = solve_obstacle(ObstacleInstance(grid, control, F, z, p))
    state = sol.state
    cert = float(np.max(np.abs(state.values - control.values)))
    objective = jp_from_state(control, state, z, p)
    converged = bool(opt_ok and cert <= certificate_tol)
    report = SolverReport(
        converged=converged,
        iterations=iterations,
        final_residual=float(opt_res) if math.isfinite(opt_res) else cert,
        complementarity_gap=sol.report.complementarity_gap,
        tolerance_used=tol,
        wall_time=time.perf_counter() - t0,
        message="" if opt_ok else "optimizer stopped early",
    )
    solution = ControlSolution(control, state, objective, cert, report, p)
    if cert > certificate_tol:
        raise CertificateFailure(
            f"fixed-point residual {cert:.3e} exceeds {certificate_tol:.1e} at p={p}", solution
        )
    return solution


def minimize_Jinf(
    z: GridFunction,
    F: BoundaryData,
    p_schedule=DEFAULT_SCHEDULE,
    certificate_tol: float = CERTIFICATE_TOL,
    stages: list | None = None,
) -> ControlSolution:
    """J_inf candidate by p-continuation, warm-starting each stage.

    The last stage's control is mapped by T_inf onto the ∞-superharmonic
    cone; the per-stage records land in ``trace`` and, when ``stages`` is a
    list, the stage solutions themselves are appended to it.
    """
    t0 = time.perf_counter()
    schedule = [float(p) for p in p_schedule]
    if not schedule or any(p <= 1.0 for p in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("p_schedule must be increasing with every entry > 1")
    warm = None
    trace = []
    iterations = 0
    all_ok = True
    for p in schedule:
        ts = time.perf_counter()
        try:
            stage = minimize_Jp(z, F, p, warm_start=warm, certificate_tol=certificate_tol)
        except CertificateFailure as exc:
            stage = exc.solution
        all_ok = all_ok and stage.report.converged
        iterations += stage.report.iterations
        hp = max(float(np.max(np.abs(stage.state.values - z.values))), sup_gradient_norm(stage.control))
        trace.append(StageRecord(p, stage.objective, hp, stage.fixed_point_residual,
                                 time.perf_counter() - ts, stage.report.converged))
        if stages is not None:
            stages.append(stage)
        warm = stage.control

    control = apply_T(warm, INF, F)
    sol = solve_obstacle(ObstacleInstance(z.grid, control, F, z, INF))
    state = sol.state
    cert = float(np.max(np.abs(state.values - control.values)))
    objective = max(float(np.max(np.abs(state.values - z.values))), sup_gradient_norm(control))
    report = SolverReport(
        converged=bool(all_ok and cert <= certificate_tol),
        iterations=iterations + sol.report.iterations,
        final_residual=cert,
        complementarity_gap=sol.report.complementarity_gap,
        tolerance_used=certificate_tol,
        wall_time=time.perf_counter() - t0,
    )
    solution = ControlSolution(control, state, objective, cert, report, INF, tuple(trace))
    if cert > certificate_tol:
        raise CertificateFailure(f"∞ fixed-point residual {cert:.3e} exceeds {certificate_tol:.1e}", solution)
    return solution


@dataclass(frozen=True)
class OptimalityCheck:
    ok: bool
    worst_improvement: float
    samples: int

    def __bool__(self):
        return self.ok


def sampled_optimality(
    solution: ControlSolution,
    z: GridFunction,
    F: BoundaryData,
    samples: int = 50,
    radius: float = 1e-2,
    seed: int = 0,
    slack: float = 1e-6,
) -> OptimalityCheck:
    """Compare J at the solution with random nearby controls and two
    canonical ones (the zero extension of F and z with F on the boundary).

    A negative ``worst_improvement`` beyond ``slack`` flags a control that
    beats the solution; for p != 2 in 2D that can happen at a local minimum.
    """
    grid = z.grid
    p = solution.p
    rng = np.random.default_rng(seed)
    J = (lambda psi: eval_Jinf(psi, z, F)) if p == INF else (lambda psi: eval_Jp(psi, z, p, F))
    base = solution.objective
    scale = max(float(np.max(np.abs(solution.control.values))), 1.0) * radius
    pinned = embed_boundary(F, 0.0)
    candidates = [pinned, GridFunction(grid, np.where(grid.boundary_mask, pinned.values, z.values))]
    for _ in range(samples):
        delta = rng.uniform(-scale, scale, grid.n_nodes)
        delta[grid.boundary_mask] = 0.0
        candidates.append(GridFunction(grid, solution.control.values + delta))
    worst = min(J(eta) - base for eta in candidates)
    return OptimalityCheck(worst >= -slack, float(worst), len(candidates))


def _concave_level_witness(z: GridFunction, F: BoundaryData, t: float) -> GridFunction:
    lowered = z.values - t
    lowered[[0, -1]] = np.minimum(lowered[[0, -1]], F.values)
    return lcm_1d(GridFunction(z.grid, lowered), F)


def _level_feasible(z: GridFunction, F: BoundaryData, t: float) -> tuple[bool, GridFunction]:
    if abs(F.values[0] - z.values[0]) > t or abs(F.values[1] - z.values[-1]) > t:
        return False, None
    m = _concave_level_witness(z, F, t)
    slope = float(np.max(np.abs(np.diff(m.values)))) / z.grid.spacing[0]
    fits = float(np.max(m.values - z.values)) <= t
    return bool(fits and slope <= t), m


def minimize_Jinf_1d_direct(z: GridFunction, F: BoundaryData, tol: float = 1e-6) -> ControlSolution:
    """Exact 1D reference for min J_inf by bisection on the objective level.

    In 1D the admissible controls may be taken concave.  For a level t the
    least concave majorant m_t of ``z - t`` (pinned to F) is the lowest
    concave candidate, and it also has the smallest possible slopes, so
    level t is attainable iff ``m_t <= z + t`` and ``|m_t'| <= t``.
    """
    t0 = time.perf_counter()
    grid = z.grid
    if grid.dimension != 1:
        raise ValueError("minimize_Jinf_1d_direct is 1D only")
    chord = abs(F.values[1] - F.values[0]) / grid.extent[0]
    lo = max(abs(F.values[0] - z.values[0]), abs(F.values[1] - z.values[-1]), chord)
    ok, witness = _level_feasible(z, F, lo)
    hi = lo
    iterations = 0
    if not ok:
        step = max(lo, float(np.max(np.abs(z.values))), 1e-12)
        hi = lo + step
        while True:
            iterations += 1
            ok, witness = _level_feasible(z, F, hi)
            if ok:
                break
            lo, hi = hi, hi + 2 * (hi - lo)
        while hi - lo > tol:
            iterations += 1
            mid = 0.5 * (lo + hi)
            ok, cand = _level_feasible(z, F, mid)
            if ok:
                hi, witness = mid, cand
            else:
                lo = mid
    objective = max(float(np.max(np.abs(witness.values - z.values))),
                    float(np.max(np.abs(np.diff(witness.values)))) / grid.spacing[0])
    cert = float(np.max(np.abs(lcm_1d(witness, F).values - witness.values)))
    report = SolverReport(True, iterations, hi - lo, 0.0, tol, time.perf_counter() - t0)
    return ControlSolution(witness, witness, objective, cert, report, INF)


__all__ = [
    "CERTIFICATE_TOL",
    "ControlSolution",
    "InfeasibleObstacle",
    "StageRecord",
    "eval_Hp",
    "eval_Jinf",
    "eval_Jp",
    "fixed_point_residual",
    "harmonic_extension",
    "jp_from_state",
    "minimize_Jinf",
    "minimize_Jinf_1d_direct",
    "minimize_Jp",
    "sampled_optimality",
]
