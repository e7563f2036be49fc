"""Discrete differential operators and functionals on uniform grids.

Gradients are cell based: every lattice cell carries one forward-difference
gradient taken at its lower-left corner, so the p-Dirichlet energy is a sum
of ``|D_h u|^p`` times the cell volume.  The p-Laplacian residual is the
variational derivative of that sum, which keeps energy and operator exactly
consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .grid import Grid, GridFunction

DEGENERATE_GRADIENT = 1e-12


@dataclass(frozen=True, eq=False)
class EnergyEvaluation:
    value: float
    gradient: GridFunction


@lru_cache(maxsize=64)
def difference_matrices(grid: Grid) -> tuple[sp.csr_matrix, ...]:
    """Forward-difference matrices, one per axis, shape ``(n_cells, n_nodes)``."""
    if grid.dimension == 1:
        n = grid.shape[0]
        h = grid.spacing[0]
        d = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h
        return (d.tocsr(),)
    nx, ny = grid.shape
    hx, hy = grid.spacing
    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ci, cj = ci.ravel(order="F"), cj.ravel(order="F")
    rows = np.arange(ci.size)
    corner = ci + nx * cj
    mats = []
    for step, h in ((1, hx), (nx, hy)):
        data = np.concatenate([-np.ones(rows.size), np.ones(rows.size)]) / h
        m = sp.csr_matrix(
            (data, (np.concatenate([rows, rows]), np.concatenate([corner, corner + step]))),
            shape=(rows.size, grid.n_nodes),
        )
        mats.append(m)
    return tuple(mats)


def cell_gradients(u: GridFunction) -> np.ndarray:
    """Forward-difference gradient per cell, shape ``(n_cells, dimension)``."""
    return np.stack([d @ u.values for d in difference_matrices(u.grid)], axis=1)


def _check_p(p: float):
    if not (p > 1.0) or not math.isfinite(p):
        raise ValueError(f"p must be finite and > 1, got {p}")


def _gradient_weight(norms: np.ndarray, p: float) -> np.ndarray:
    """``|g|^(p-2)`` with degenerate cells set to zero (except p = 2)."""
    if p == 2.0:
        return np.ones_like(norms)
    out = np.zeros_like(norms)
    ok = norms >= DEGENERATE_GRADIENT if p < 2 else norms > 0
    out[ok] = norms[ok] ** (p - 2.0)
    return out


def energy_and_gradient(grid: Grid, values: np.ndarray, p: float) -> tuple[float, np.ndarray]:
    """Raw-array version of :func:`p_energy`; the gradient covers all nodes."""
    mats = difference_matrices(grid)
    g = np.stack([d @ values for d in mats], axis=1)
    norms = np.sqrt(np.sum(g * g, axis=1))
    vol = grid.cell_volume
    value = float(np.sum(norms**p) * vol)
    flux = p * _gradient_weight(norms, p)[:, None] * g * vol
    grad = sum(d.T @ flux[:, a] for a, d in enumerate(mats))
    grad[grid.boundary_mask] = 0.0
    return value, grad


def energy_hessian(grid: Grid, values: np.ndarray, p: float, floor: float = 0.0) -> sp.csr_matrix:
    """Hessian of the p-Dirichlet energy over all nodes.

    ``floor`` bounds ``|g|`` from below inside ``|g|^(p-2)``; it only matters
    for p < 2, where the exact Hessian is unbounded at flat cells.
    """
    mats = difference_matrices(grid)
    g = np.stack([d @ values for d in mats], axis=1)
    norms = np.sqrt(np.sum(g * g, axis=1))
    vol = grid.cell_volume
    if p < 2.0:
        safe = np.maximum(norms, max(floor, DEGENERATE_GRADIENT))
        weight = safe ** (p - 2.0)
    else:
        weight = _gradient_weight(norms, p)
    unit = np.divide(g, norms[:, None], out=np.zeros_like(g), where=norms[:, None] > 0)
    hess = None
    for a, da in enumerate(mats):
        for b, db in enumerate(mats):
            coeff = p * weight * ((a == b) + (p - 2.0) * unit[:, a] * unit[:, b]) * vol
            term = da.T @ sp.diags(coeff) @ db
            hess = term if hess is None else hess + term
    return hess.tocsr()


def p_energy(u: GridFunction, p: float) -> EnergyEvaluation:
    _check_p(p)
    value, grad = energy_and_gradient(u.grid, u.values, p)
    return EnergyEvaluation(value, GridFunction(u.grid, grad))


def interior_node_volume(grid: Grid) -> float:
    return grid.cell_volume


def p_laplacian_residual(u: GridFunction, p: float) -> GridFunction:
    """Discrete ``-Δ_p u``; positive where ``u`` is superharmonic."""
    _check_p(p)
    _, grad = energy_and_gradient(u.grid, u.values, p)
    return GridFunction(u.grid, grad / (p * interior_node_volume(u.grid)))


def local_gradient_scale(grid: Grid, values: np.ndarray, p: float) -> np.ndarray:
    """``m^(p-2)`` per node, m the largest adjacent cell-gradient norm.

    Dividing the p-Laplacian residual by this puts it in Laplacian units, so
    one tolerance works for every p.  Nodes with m = 0 get scale 1 (their
    residual is exactly zero).
    """
    if p == 2.0:
        return np.ones(grid.n_nodes)
    mats = difference_matrices(grid)
    g = np.stack([d @ values for d in mats], axis=1)
    norms = np.sqrt(np.sum(g * g, axis=1))
    incidence = abs(sum(abs(d) for d in mats)).tocsc()
    m = np.zeros(grid.n_nodes)
    coo = incidence.tocoo()
    np.maximum.at(m, coo.col, norms[coo.row])
    out = np.ones(grid.n_nodes)
    out[m > 0] = m[m > 0] ** (p - 2.0)
    return out


def normalize_residual(residual: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # scale underflows to 0 only where the residual is negligible as well
    return np.divide(residual, scale, out=np.zeros_like(residual), where=scale > 0)


def normalized_p_residual(u: GridFunction, p: float) -> GridFunction:
    r = p_laplacian_residual(u, p).values
    return GridFunction(u.grid, normalize_residual(r, local_gradient_scale(u.grid, u.values, p)))


@lru_cache(maxsize=64)
def neighbor_table(grid: Grid) -> np.ndarray:
    """Axis neighbours of each interior node, shape ``(n_interior, 2*dim)``."""
    interior = grid.interior_indices
    if grid.dimension == 1:
        return np.stack([interior - 1, interior + 1], axis=1)
    nx = grid.shape[0]
    return np.stack([interior - 1, interior + 1, interior - nx, interior + nx], axis=1)


def midrange_of_neighbors(grid: Grid, values: np.ndarray) -> np.ndarray:
    """``(max_N u + min_N u) / 2`` at every interior node."""
    nb = values[neighbor_table(grid)]
    return 0.5 * (nb.max(axis=1) + nb.min(axis=1))


def inf_laplacian_residual(u: GridFunction) -> GridFunction:
    """Monotone two-point ∞-Laplacian residual ``u - (max_N u + min_N u)/2``.

    Not divided by h^2: the sign is what matters for superharmonicity and
    comparison, and the unscaled form is exactly the value-iteration defect.
    """
    out = np.zeros(u.grid.n_nodes)
    interior = u.grid.interior_indices
    out[interior] = u.values[interior] - midrange_of_neighbors(u.grid, u.values)
    return GridFunction(u.grid, out)


def lq_norm(u: GridFunction, q: float) -> float:
    if q == math.inf:
        return float(np.max(np.abs(u.values)))
    if not q >= 1.0:
        raise ValueError(f"q must be >= 1 or inf, got {q}")
    return power_mean(np.abs(u.values), u.grid.nodal_volume(), q)


def sup_gradient_norm(u: GridFunction) -> float:
    g = cell_gradients(u)
    return float(np.max(np.sqrt(np.sum(g * g, axis=1))))


def log_power_sum(magnitudes: np.ndarray, weights: np.ndarray, p: float) -> float:
    """``log(sum_k w_k |a_k|^p)`` evaluated without overflow."""
    a = np.abs(np.asarray(magnitudes, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    keep = (a > 0) & (w > 0)
    if not np.any(keep):
        return -math.inf
    return float(logsumexp(p * np.log(a[keep]) + np.log(w[keep])))


def power_mean(magnitudes: np.ndarray, weights: np.ndarray, p: float) -> float:
    """``(sum_k w_k |a_k|^p)^(1/p)``; log-space once p >= 16."""
    if p < 16:
        a = np.abs(np.asarray(magnitudes, dtype=np.float64))
        return float(np.sum(np.asarray(weights) * a**p) ** (1.0 / p))
    return float(math.exp(log_power_sum(magnitudes, weights, p) / p))
