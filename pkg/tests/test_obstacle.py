import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull

from obsctl.grid import BoundaryData, embed_boundary, GridFunction, ObstacleInstance, interpolate_boundary, make_grid
from obsctl.instances import SUITE, builtin
from obsctl.obstacle import (
    InfeasibleObstacle,
    NonConvergence,
    apply_T,
    brute_force_obstacle,
    complementarity_gap,
    is_p_superharmonic,
    lcm_1d,
    solve_inf_obstacle,
    solve_obstacle,
    solve_p_obstacle,
)
from obsctl.operators import inf_laplacian_residual

INF = math.inf


def hull_majorant(x, y):
    """Upper convex hull via scipy's Qhull, evaluated on the nodes."""
    lift = np.concatenate([y, [y.min() - 1.0] * 2])
    pts = np.column_stack([np.concatenate([x, [x[0], x[-1]]]), lift])
    hull = ConvexHull(pts)
    top = sorted(v for v in hull.vertices if v < x.size)
    return np.interp(x, x[top], y[top])


def random_obstacle(grid, rng, bumps=3):
    x = grid.axes()[0]
    amp = rng.uniform(-0.3, 1.0, bumps)
    cen = rng.uniform(0.1, 0.9, bumps)
    wid = rng.uniform(0.05, 0.3, bumps)
    vals = np.max(amp[:, None] * np.exp(-((x - cen[:, None]) / wid[:, None]) ** 2), axis=0) - 0.1
    vals[[0, -1]] = np.minimum(vals[[0, -1]], 0.0)
    return GridFunction(grid, vals)


@given(seed=st.integers(0, 10**6), n=st.integers(3, 40))
def test_lcm_matches_qhull(seed, n):
    g = make_grid(1, [n], [1.0])
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    y[0], y[-1] = -abs(y[0]) - 1, -abs(y[-1]) - 1
    m = lcm_1d(GridFunction(g, y), BoundaryData(g, [y[0], y[-1]]))
    assert np.allclose(m.values, hull_majorant(g.axes()[0], y), atol=1e-12)


@pytest.mark.parametrize("p", [2.0, 4.0, 8.0, INF])
def test_1d_solver_matches_least_concave_majorant(rng, p):
    g = make_grid(1, [65], [1.0])
    zero = BoundaryData.constant(g, 0.0)
    for _ in range(3):
        psi = random_obstacle(g, rng)
        u = solve_obstacle(ObstacleInstance(g, psi, zero, None, p)).state
        assert np.max(np.abs(u.values - lcm_1d(psi, zero).values)) <= 1e-8


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_small_2d_matches_brute_force(rng, p):
    g = make_grid(2, [5, 6], [1.0, 1.0])
    psi = GridFunction(g, rng.uniform(-1, 1, g.n_nodes))
    bd = BoundaryData(g, np.maximum(psi.values[g.boundary_mask], 0.0) + 0.1)
    inst = ObstacleInstance(g, psi, bd, None, p)
    u = solve_obstacle(inst, tol=1e-10).state
    ref = brute_force_obstacle(inst, tol=1e-12)
    assert np.max(np.abs(u.values - ref.values)) <= 1e-5


def test_brute_force_enumeration_agrees_with_active_set(rng):
    from obsctl.obstacle import _dense_energy_matrix, _qp_by_active_set, _qp_by_enumeration

    g = make_grid(2, [5, 5], [1.0, 1.0])
    psi = GridFunction(g, rng.uniform(-1, 1, g.n_nodes))
    inst = ObstacleInstance(g, psi, BoundaryData.constant(g, 1.0))
    a, b = _dense_energy_matrix(inst)
    lower = psi.values[g.interior_indices]
    assert np.allclose(_qp_by_enumeration(a, b, lower), _qp_by_active_set(a, b, lower), atol=1e-12)


@pytest.mark.parametrize("name", SUITE)
@pytest.mark.parametrize("p", [2.0, 4.0, INF])
def test_suite_complementarity_and_feasibility(name, p):
    inst = builtin(name).with_p(p)
    u = solve_obstacle(inst).state
    g = inst.grid
    assert np.all(u.values >= inst.obstacle.values - 1e-10)
    assert np.array_equal(u.values[g.boundary_mask], inst.boundary.values)
    assert complementarity_gap(u, inst.obstacle, p) <= 1e-6


def test_below_boundary_returns_interpolant():
    inst = builtin("below-boundary")
    for p in (2.0, 4.0, INF):
        u = solve_obstacle(inst.with_p(p)).state
        assert np.allclose(u.values, interpolate_boundary(inst.boundary).values, atol=1e-12)


@pytest.mark.parametrize("p", [2.0, INF])
def test_comparison_principle(rng, p):
    g = make_grid(2, [9, 9], [1.0, 1.0])
    bd = BoundaryData.constant(g, 0.5)
    for _ in range(3):
        lo = rng.uniform(-1, 0.5, g.n_nodes)
        hi = lo + rng.uniform(0, 0.5, g.n_nodes)
        lo[g.boundary_mask] = np.minimum(lo[g.boundary_mask], 0.5)
        hi[g.boundary_mask] = np.minimum(hi[g.boundary_mask], 0.5)
        u1 = apply_T(GridFunction(g, lo), p, bd)
        u2 = apply_T(GridFunction(g, hi), p, bd)
        assert np.all(u1.values <= u2.values + 2e-8)


@pytest.mark.parametrize("name", ["twopeak1d", "bump2d"])
@pytest.mark.parametrize("p", [2.0, 8.0, INF])
def test_idempotence(name, p):
    inst = builtin(name).with_p(p)
    u = solve_obstacle(inst).state
    again = apply_T(u, p, inst.boundary)
    assert np.max(np.abs(again.values - u.values)) <= 2e-8


def random_concave_supersolution(grid, floor_values, rng, planes=4):
    """Minimum of random affine functions lifted above ``floor_values``.

    A minimum of affine functions satisfies the two-point ∞-superharmonic
    inequality at every node, so it is a discrete ∞-supersolution.
    """
    xy = grid.coordinates()
    slopes = rng.normal(size=(planes, grid.dimension))
    v = np.min(xy @ slopes.T + rng.normal(size=planes), axis=1)
    return v + np.max(floor_values - v) + rng.uniform(0, 0.1)


def test_inf_solution_is_minimal_among_supersolutions(rng):
    inst = builtin("bump2d").with_p(INF)
    g = inst.grid
    u = solve_inf_obstacle(inst).state
    floor = np.where(g.boundary_mask, embed_boundary(inst.boundary, 0.0).values, inst.obstacle.values)
    for _ in range(5):
        v = GridFunction(g, random_concave_supersolution(g, floor, rng))
        assert np.all(inf_laplacian_residual(v).values >= -1e-12)
        assert np.all(u.values <= v.values + 2e-8)


def test_value_iteration_is_monotone():
    inst = builtin("twopeak1d").with_p(INF)
    seen = []
    solve_inf_obstacle(inst, polish=False, monitor=seen.append)
    assert all(np.all(b <= a + 1e-15) for a, b in zip(seen, seen[1:]))


def test_polish_reaches_the_same_solution():
    inst = builtin("twopeak1d").with_p(INF)
    a = solve_inf_obstacle(inst, polish=True, tol=1e-12).state
    b = solve_inf_obstacle(inst, polish=False, tol=1e-12).state
    assert np.max(np.abs(a.values - b.values)) <= 1e-9


def test_infeasible_obstacle_raises():
    inst = builtin("infeasible1d")
    for p in (2.0, INF):
        with pytest.raises(InfeasibleObstacle):
            solve_obstacle(inst.with_p(p))


def test_nonconvergence_carries_partial_solution():
    inst = builtin("bump2d").with_p(4.0)
    with pytest.raises(NonConvergence) as info:
        solve_p_obstacle(inst, tol=1e-14, max_iter=1)
    assert info.value.solution is not None
    assert not info.value.solution.report.converged


def test_report_json_fields():
    sol = solve_obstacle(builtin("tent1d"))
    d = sol.report.to_json()
    assert set(d) == {"converged", "iterations", "final_residual", "complementarity_gap",
                      "tolerance_used", "wall_time_s"}
    assert d["converged"] and d["tolerance_used"] == 1e-8


def test_superharmonic_check():
    g = make_grid(1, [11], [1.0])
    cap = GridFunction.from_callable(g, lambda x: x * (1 - x))
    cup = GridFunction.from_callable(g, lambda x: -x * (1 - x))
    assert is_p_superharmonic(cap, 3.0)
    check = is_p_superharmonic(cup, INF)
    assert not check and check.worst_residual < 0


@pytest.mark.parametrize("p", [2.0, 3.0, 8.0, INF])
def test_concave_tent_is_its_own_solution(p):
    g = make_grid(1, [65], [1.0])
    psi = GridFunction.from_callable(g, lambda x: 1 - 2 * np.abs(x - 0.5))
    u = solve_obstacle(ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), None, p)).state
    assert np.max(np.abs(u.values - psi.values)) <= 1e-8


@pytest.mark.parametrize("p", [2.0, INF])
def test_negative_obstacle_2d_gives_zero(p):
    g = make_grid(2, [9, 9], [1.0, 1.0])
    inst = ObstacleInstance(g, GridFunction.constant(g, -1.0), BoundaryData.constant(g, 0.0), None, p)
    assert np.max(np.abs(solve_obstacle(inst).state.values)) <= 1e-12


def test_five_node_instance_against_enumeration():
    g = make_grid(1, [5], [1.0])
    psi = GridFunction(g, [0.0, 0.2, 0.8, 0.2, 0.0])
    inst = ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0))
    u = solve_p_obstacle(inst).state
    assert np.max(np.abs(u.values - brute_force_obstacle(inst).values)) <= 1e-8
    assert np.allclose(u.values, [0.0, 0.4, 0.8, 0.4, 0.0])


def test_two_peak_inf_hull():
    g = make_grid(1, [65], [1.0])
    psi = GridFunction.from_callable(
        g, lambda x: np.maximum(0, np.maximum(0.5 - 4 * np.abs(x - 0.25), 0.5 - 4 * np.abs(x - 0.75))))
    u = solve_inf_obstacle(ObstacleInstance(g, psi, BoundaryData.constant(g, 0.0), None, INF)).state
    x = g.axes()[0]
    assert np.allclose(u.values, np.interp(x, [0, 0.25, 0.75, 1], [0, 0.5, 0.5, 0]), atol=1e-10)
    assert np.max(np.abs(np.diff(u.values))) / g.spacing[0] == pytest.approx(2.0)


def test_superharmonic_obstacle_is_fixed():
    inst = builtin("bump2d")
    u = solve_inf_obstacle(inst.with_p(INF)).state
    again = solve_inf_obstacle(ObstacleInstance(inst.grid, u, inst.boundary, None, INF)).state
    assert np.max(np.abs(again.values - u.values)) <= 2e-8


def test_superharmonic_check_examples():
    # dyadic spacing keeps the affine residual free of roundoff
    g = make_grid(2, [9, 9], [1.0, 1.0])
    cap = GridFunction.from_callable(g, lambda x, y: -x**2 - y**2)
    cup = GridFunction.from_callable(g, lambda x, y: x**2 + y**2)
    flat = GridFunction.from_callable(g, lambda x, y: 2 * x - y)
    assert is_p_superharmonic(cap, 2.0)
    for p in (2.0, 4.0, INF):
        assert not is_p_superharmonic(cup, p)
        check = is_p_superharmonic(flat, p)
        assert check and check.worst_residual == 0.0


def test_lcm_examples():
    g = make_grid(1, [17], [1.0])
    x = g.axes()[0]
    cap = GridFunction(g, 0.2 + x * (1 - x))
    assert np.array_equal(lcm_1d(cap, cap.boundary()).values, cap.values)
    neg = GridFunction(g, -np.abs(np.sin(7 * x)))
    assert np.all(lcm_1d(neg, BoundaryData.constant(g, 0.0)).values == 0.0)
    with pytest.raises(InfeasibleObstacle):
        lcm_1d(GridFunction.constant(g, 1.0), BoundaryData.constant(g, 0.0))


def test_brute_force_examples(rng):
    g = make_grid(1, [9], [1.0])
    low = GridFunction(g, -2.0 + 0.1 * rng.normal(size=9))
    bd = BoundaryData(g, [0.0, 1.0])
    for p in (2.0, 4.0):
        ref = brute_force_obstacle(ObstacleInstance(g, low, bd, None, p), tol=1e-12)
        assert np.allclose(ref.values, g.axes()[0], atol=1e-5)
    cap = GridFunction.from_callable(g, lambda x: 0.3 - np.abs(x - 0.4))
    zero = BoundaryData.constant(g, 0.0)
    ref = brute_force_obstacle(ObstacleInstance(g, cap, zero, None, 3.0), tol=1e-12)
    assert np.allclose(ref.values, lcm_1d(cap, zero).values, atol=1e-5)
    with pytest.raises(ValueError):
        brute_force_obstacle(builtin("tent1d"))


def test_energy_optimality_against_feasible_competitors(rng):
    from obsctl.operators import p_energy

    inst = builtin("bump2d").with_p(4.0)
    g = inst.grid
    u = solve_obstacle(inst).state
    e = p_energy(u, 4.0).value
    competitors = [np.maximum(inst.obstacle.values, interpolate_boundary(inst.boundary).values)]
    for _ in range(10):
        bump = np.where(g.boundary_mask, 0.0, np.abs(rng.normal(scale=0.01, size=g.n_nodes)))
        competitors.append(u.values + bump)
    for eta in competitors:
        assert e <= p_energy(GridFunction(g, eta), 4.0).value + 1e-6


def test_minimality_against_value_iteration_supersolutions(rng):
    inst = builtin("twopeak1d").with_p(INF)
    g = inst.grid
    u = solve_inf_obstacle(inst).state.values
    for _ in range(5):
        # T_inf of a random obstacle above psi is an ∞-supersolution above psi
        lift = np.where(g.boundary_mask, 0.0, inst.obstacle.values + rng.uniform(0, 0.3, g.n_nodes))
        v = solve_inf_obstacle(ObstacleInstance(g, GridFunction(g, lift), inst.boundary, None, INF)).state.values
        assert np.all(u <= v + 2e-8)


def test_p_to_inf_distance_nonincreasing_in_1d():
    inst = builtin("twopeak1d")
    uinf = solve_obstacle(inst.with_p(INF)).state.values
    d = [np.max(np.abs(solve_obstacle(inst.with_p(p)).state.values - uinf)) for p in (2, 4, 8, 16, 32)]
    assert all(b <= a + 1e-3 for a, b in zip(d, d[1:]))
