"""Projected Newton method for smooth convex problems with lower bounds.

Follows Bertsekas (1982): variables near their bound with a positive
gradient are treated as active and take a diagonally scaled gradient step;
the rest take a Newton step on the reduced Hessian.  The trial point is
projected back onto ``x >= lower`` and accepted by an Armijo test along the
projection arc.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

ARMIJO = 1e-4
ROUNDOFF = 1e-13


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    message: str


def _reduced_solve(hess, free: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    if not free.any():
        return np.zeros(0)
    if sp.issparse(hess):
        sub = hess[free][:, free].tocsc()
        diag = np.abs(sub.diagonal())
        sub = sub + sp.diags(1e-10 * diag + 1e-30 * max(float(diag.max()), 1e-280), format="csc")
        try:
            d = scipy.sparse.linalg.spsolve(sub, rhs)
        except RuntimeError:
            return None
    else:
        sub = hess[np.ix_(free, free)]
        diag = np.abs(np.diag(sub))
        sub = sub + np.diag(1e-10 * diag + 1e-30 * max(float(diag.max()), 1e-280))
        try:
            d = scipy.linalg.solve(sub, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            return None
    d = np.atleast_1d(d)
    return d if np.all(np.isfinite(d)) else None


def projected_newton(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    hess: Callable[[np.ndarray], object],
    x0: np.ndarray,
    lower: np.ndarray,
    residual: Callable[[np.ndarray, np.ndarray], float],
    tol: float,
    max_iter: int,
    eps_active: float = 1e-3,
) -> NewtonResult:
    """Minimise ``fun`` over ``x >= lower``.

    ``fun`` returns value and gradient, ``hess`` the Hessian (dense or
    sparse), and ``residual(x, grad)`` the optimality measure compared
    against ``tol``.
    """
    lower = np.asarray(lower, dtype=np.float64)
    x = np.maximum(np.asarray(x0, dtype=np.float64), lower)
    f, g = fun(x)
    res = residual(x, g)
    it = 0
    message = "converged"
    while res > tol:
        if it >= max_iter:
            message = "max iterations"
            break
        it += 1
        pg = x - np.maximum(lower, x - g)
        eps = min(eps_active, float(np.max(np.abs(pg))))
        active = (x - lower <= eps) & (g > 0)
        free = ~active
        h = hess(x)
        diag = np.asarray(h.diagonal()).ravel()
        diag_scale = np.where(diag > 0, diag, max(float(diag.max(initial=0.0)), 1.0))
        d = -g / diag_scale
        d_free = _reduced_solve(h, free, -g[free])
        if d_free is not None and float(g[free] @ d_free) < 0:
            d[free] = d_free

        alpha = 1.0
        accepted = False
        while alpha > 1e-14:
            trial = np.maximum(lower, x + alpha * d)
            ft, gt = fun(trial)
            bound = alpha * float(g[free] @ d[free]) + float(g[active] @ (trial - x)[active])
            if ft <= f + ARMIJO * bound and np.isfinite(ft):
                accepted = True
                break
            # below the resolution of f, judge the step by the residual instead
            if abs(ft - f) <= ROUNDOFF * abs(f) and residual(trial, gt) < res:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # Newton direction failed; retry with a plain scaled gradient step.
            d = -g / diag_scale
            alpha = 1.0
            while alpha > 1e-14:
                trial = np.maximum(lower, x + alpha * d)
                ft, gt = fun(trial)
                if ft <= f + ARMIJO * float(g @ (trial - x)) and np.isfinite(ft):
                    accepted = True
                    break
                alpha *= 0.5
        if not accepted:
            message = "line search stalled"
            break
        step = float(np.max(np.abs(trial - x)))
        x, f, g = trial, ft, gt
        res = residual(x, g)
        if step == 0.0 and res > tol:
            message = "stagnated"
            break
    return NewtonResult(x, it, res, res <= tol, message if res > tol else "converged")
