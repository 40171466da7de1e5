"""Newton solvers for moment matching.

``mxed_correct`` tilts a prior sample cloud by exp(lam . R) so that the
importance-weighted moments of R hit given targets; it is the bias
correction applied after the multilevel fit.  ``med_newton_oracle`` is
the classical grid-quadrature Newton solver for plain exponential-family
fits, kept as an independent cross-check for the closed-form solve.
Both use the update  lam <- lam - L^{-1} g  with step halving whenever
the dual objective rises or an iterate stops being integrable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import expr as ex
from .errors import NewtonNonConvergenceError, WeightDegeneracyError
from .numerics import panel_nodes

STEP_FLOOR = 2.0 ** -20
ESS_FRACTION = 0.01


@dataclass
class NewtonState:
    lam: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    iterations: int
    converged: bool
    tol: float


@dataclass
class MxedResult:
    lam: np.ndarray
    weights: np.ndarray
    state: NewtonState


def mxed_correct(prior_samples, target_moments, basis_exprs, tol: float = 1e-6,
                 max_iters: int = 100) -> MxedResult:
    """Match importance-weighted moments of the prior to the targets.

    Returns the multipliers, the self-normalized weights (summing to one)
    and the final Newton state.  Raises NewtonNonConvergenceError if the
    gradient tolerance is not reached and WeightDegeneracyError when the
    effective sample size drops below 1% of the prior size.
    """
    pts = prior_samples.values if hasattr(prior_samples, "values") else np.asarray(prior_samples, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    mu = np.asarray(target_moments, dtype=float)
    n = pts.shape[0]
    if n < 10 * len(basis_exprs):
        raise ValueError(
            f"need at least {10 * len(basis_exprs)} prior samples, got {n}"
        )
    table = np.column_stack([ex.evaluate(e, pts) for e in basis_exprs])

    def stats(lam):
        a = table @ lam
        shift = a.max()
        w = np.exp(a - shift)
        total = w.sum()
        wn = w / total
        mom = wn @ table
        # exact Jacobian of the self-normalized moments: the centered
        # second-moment matrix (quadratic convergence near the solution)
        hess = -((table * wn[:, None]).T @ table - np.outer(mom, mom))
        grad = mu - mom
        dual = shift + math.log(total / n) - float(lam @ mu)
        return grad, hess, dual, wn

    lam = np.zeros(len(basis_exprs))
    grad, hess, dual, weights = stats(lam)
    state = NewtonState(lam, grad, hess, 0, False, tol)
    for it in range(max_iters):
        if np.max(np.abs(grad)) <= tol:
            state = NewtonState(lam, grad, hess, it, True, tol)
            _check_ess(weights, n)
            return MxedResult(lam=lam, weights=weights, state=state)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as err:
            raise NewtonNonConvergenceError(
                f"singular hessian at iteration {it}", grad_norm=float(np.max(np.abs(grad))),
                state=state,
            ) from err
        alpha = 1.0
        while alpha >= STEP_FLOOR:
            cand = lam - alpha * step
            g2, h2, d2, w2 = stats(cand)
            if math.isfinite(d2) and np.isfinite(g2).all() and d2 <= dual + 1e-12 * (1 + abs(dual)):
                lam, grad, hess, dual, weights = cand, g2, h2, d2, w2
                break
            alpha *= 0.5
        else:
            raise NewtonNonConvergenceError(
                f"step halving hit the floor at iteration {it}",
                grad_norm=float(np.max(np.abs(grad))),
                state=NewtonState(lam, grad, hess, it, False, tol),
            )
        state = NewtonState(lam, grad, hess, it + 1, False, tol)
    if np.max(np.abs(grad)) <= tol:
        state = NewtonState(lam, grad, hess, max_iters, True, tol)
        _check_ess(weights, n)
        return MxedResult(lam=lam, weights=weights, state=state)
    raise NewtonNonConvergenceError(
        f"no convergence in {max_iters} iterations "
        f"(|g|_inf = {np.max(np.abs(grad)):.3e})",
        grad_norm=float(np.max(np.abs(grad))),
        state=state,
    )


def _check_ess(weights, n):
    ess = 1.0 / float((weights ** 2).sum())
    if ess < ESS_FRACTION * n:
        raise WeightDegeneracyError(ess, n)


# ---------------------------------------------------------------------------
# Grid-quadrature Newton oracle
# ---------------------------------------------------------------------------

def oracle_grid(center, halfwidth, points: int = 4001):
    """Uniform trapezoid grid; 1-d arrays give (points, 1) nodes, pairs of
    arrays give a tensor grid in two dimensions."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    halfwidth = np.atleast_1d(np.asarray(halfwidth, dtype=float))
    axes = []
    weights = []
    for c, h in zip(center, halfwidth):
        x = np.linspace(c - h, c + h, points)
        w = np.full(points, x[1] - x[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        axes.append(x)
        weights.append(w)
    if len(axes) == 1:
        return axes[0][:, None], weights[0]
    if len(axes) == 2:
        pts = np.column_stack([
            np.repeat(axes[0], points), np.tile(axes[1], points)
        ])
        return pts, np.outer(weights[0], weights[1]).ravel()
    raise ValueError("oracle grid supports one or two dimensions only")


def med_newton_oracle(target_moments, basis_exprs, grid, tol: float = 1e-6,
                      lam0=None, max_iters: int = 100, full_output: bool = False):
    """Newton solve of the exponential-family moment problem on a fixed
    quadrature grid (one or two dimensions).

    An iterate whose exponent peaks on the grid boundary is treated as
    non-integrable and forces step halving; hitting the halving floor is
    a failure (NewtonNonConvergenceError).
    """
    pts, w = grid
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(w, dtype=float)
    mu = np.asarray(target_moments, dtype=float)
    table = np.column_stack([ex.evaluate(e, pts) for e in basis_exprs])
    boundary = _boundary_mask(pts)

    def stats(lam):
        a = table @ lam
        shift = a.max()
        q = w * np.exp(a - shift)
        z = q.sum()
        p = q / z
        mom = p @ table
        hess = -((table * p[:, None]).T @ table - np.outer(mom, mom))
        grad = mu - mom
        log_z = shift + math.log(z)
        dual = log_z - float(lam @ mu)
        # an iterate whose integrand peaks on the grid edge is effectively
        # non-integrable on the unbounded problem
        edge_peak = bool(boundary[int(np.argmax(a))])
        return grad, hess, dual, edge_peak

    lam = np.zeros(len(basis_exprs)) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    grad, hess, dual, edge = stats(lam)
    state = NewtonState(lam, grad, hess, 0, False, tol)
    for it in range(max_iters):
        if np.max(np.abs(grad)) <= tol and not edge:
            state = NewtonState(lam, grad, hess, it, True, tol)
            return (lam, state) if full_output else lam
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as err:
            raise NewtonNonConvergenceError(
                f"singular oracle hessian at iteration {it}",
                grad_norm=float(np.max(np.abs(grad))), state=state,
            ) from err
        alpha = 1.0
        while alpha >= STEP_FLOOR:
            cand = lam - alpha * step
            g2, h2, d2, e2 = stats(cand)
            ok = (
                math.isfinite(d2)
                and np.isfinite(g2).all()
                and not e2
                and d2 <= dual + 1e-12 * (1 + abs(dual))
            )
            if ok:
                lam, grad, hess, dual, edge = cand, g2, h2, d2, e2
                break
            alpha *= 0.5
        else:
            raise NewtonNonConvergenceError(
                f"oracle step halving hit the floor at iteration {it}",
                grad_norm=float(np.max(np.abs(grad))),
                state=NewtonState(lam, grad, hess, it, False, tol),
            )
        state = NewtonState(lam, grad, hess, it + 1, False, tol)
    if np.max(np.abs(grad)) <= tol:
        state = NewtonState(lam, grad, hess, max_iters, True, tol)
        return (lam, state) if full_output else lam
    raise NewtonNonConvergenceError(
        f"oracle did not converge in {max_iters} iterations "
        f"(|g|_inf = {np.max(np.abs(grad)):.3e})",
        grad_norm=float(np.max(np.abs(grad))), state=state,
    )


def _boundary_mask(pts):
    mask = np.zeros(pts.shape[0], dtype=bool)
    for j in range(pts.shape[1]):
        mask |= pts[:, j] == pts[:, j].min()
        mask |= pts[:, j] == pts[:, j].max()
    return mask


def default_oracle_grid(samples, points: int = 4001, width: float = 8.0):
    """Grid spanning mean +- width*std of the samples."""
    return oracle_grid(samples.mean, width * samples.std, points)
