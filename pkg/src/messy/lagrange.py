"""Closed-form multiplier solve from gradient/Laplacian sample moments.

The exponent coefficients of an exponential-family fit solve the linear
system  L lam = -b  with L the gradient Gram matrix and b the mean basis
Laplacian; no iteration is involved.  The residual g = L lam + b doubles
as the moment relaxation-rate diagnostic (zero at the fit).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .basis import FeatureTables
from .errors import SingularHessianError

RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class LagrangeSolve:
    lam: np.ndarray
    hessian: np.ndarray
    cond: float
    residual_g: np.ndarray


def assemble_hessian(features: FeatureTables) -> np.ndarray:
    """L[i, j] = (1/n) sum_k sum_m grad_i(X_k)[m] grad_j(X_k)[m]."""
    g = features.grad_h
    n = g.shape[0]
    L = np.einsum("kim,kjm->ij", g, g, optimize=True) / n
    return 0.5 * (L + L.T)


def laplacian_moment(features: FeatureTables) -> np.ndarray:
    """b[i] = (1/n) sum_k lap_i(X_k)."""
    return features.lap_h.mean(axis=0)


def solve_lambda(L: np.ndarray, b: np.ndarray) -> LagrangeSolve:
    """Solve L lam = -b by Cholesky, falling back to column-pivoted least
    squares when round-off breaks positive definiteness.

    Raises SingularHessianError when even the fallback cannot meet the
    residual tolerance; the estimated condition number rides along.
    """
    L = np.asarray(L, dtype=float)
    b = np.asarray(b, dtype=float)
    cond = float(np.linalg.cond(L))
    try:
        chol = np.linalg.cholesky(L)
        lam = scipy.linalg.cho_solve((chol, True), -b)
    except np.linalg.LinAlgError:
        lam = scipy.linalg.lstsq(L, -b, lapack_driver="gelsy")[0]
    residual = L @ lam + b
    if not np.isfinite(lam).all() or np.max(np.abs(residual)) >= RESIDUAL_TOL * (
        1.0 + np.max(np.abs(b), initial=0.0)
    ):
        raise SingularHessianError(cond)
    return LagrangeSolve(lam=lam, hessian=L, cond=cond, residual_g=residual)


def relaxation_rate(features: FeatureTables, lam: np.ndarray) -> np.ndarray:
    """g = L lam + b from the same feature tables; zero at the solution."""
    return assemble_hessian(features) @ np.asarray(lam, dtype=float) + laplacian_moment(features)
