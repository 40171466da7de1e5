"""Basis sets: symbolic derivatives, feature tables, and orthonormalization.

A BasisSet bundles raw expressions with their exact gradients/Laplacians
and a lower-triangular transform mapping raw to working basis functions.
Orthonormalization runs modified Gram-Schmidt on the gradient features
under the empirical inner product

    <phi, psi> = (1/N) sum_k sum_j d_j phi(X_k) d_j psi(X_k),

summed over all dimensions, so the orthonormalized gradient Gram matrix
(the multiplier-system hessian) comes out close to identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import EvaluationError, LinearDependenceError
from .samples import SampleSet

PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class BasisSet:
    exprs: tuple
    grads: tuple          # grads[i][j] = d exprs[i] / d x_j
    laplacians: tuple
    transform: np.ndarray  # lower triangular, positive diagonal
    dimension: int

    def __post_init__(self):
        t = np.array(self.transform, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "transform", t)

    @property
    def size(self) -> int:
        return len(self.exprs)

    def is_orthonormalized(self) -> bool:
        return not np.array_equal(self.transform, np.eye(self.size))


@dataclass(frozen=True)
class FeatureTables:
    h: np.ndarray       # (n, n_basis)
    grad_h: np.ndarray  # (n, n_basis, d)
    lap_h: np.ndarray   # (n, n_basis)

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def n_basis(self) -> int:
        return self.h.shape[1]


def build(exprs, dimension: int) -> BasisSet:
    """Assemble a BasisSet with identity transform and exact derivatives."""
    exprs = tuple(exprs)
    if not exprs:
        raise ValueError("need at least one basis expression")
    for e in exprs:
        if ex.max_var_index(e) >= dimension:
            raise ValueError(
                f"{ex.render(e)!r} uses variables beyond dimension {dimension}"
            )
    grads = tuple(
        tuple(ex.differentiate(e, j) for j in range(dimension)) for e in exprs
    )
    laps = tuple(ex.laplacian(e, dimension) for e in exprs)
    return BasisSet(exprs, grads, laps, np.eye(len(exprs)), dimension)


def features(basis: BasisSet, samples: SampleSet) -> FeatureTables:
    """Evaluate value/gradient/Laplacian tables and apply the transform."""
    if samples.dimension != basis.dimension:
        raise ValueError(
            f"sample dimension {samples.dimension} != basis dimension {basis.dimension}"
        )
    pts = samples.values
    powers = _monomial_powers(basis)
    if powers is not None:
        h, grad, lap = _poly_tables(powers, pts)
    else:
        h, grad, lap = _generic_tables(basis, pts)
    t = basis.transform
    if basis.is_orthonormalized():
        h = h @ t.T
        lap = lap @ t.T
        grad = np.einsum("bi,nid->nbd", t, grad, optimize=True)
    return FeatureTables(h, grad, lap)


def _generic_tables(basis, pts):
    n, d = pts.shape
    nb = basis.size
    h = np.empty((n, nb))
    grad = np.empty((n, nb, d))
    lap = np.empty((n, nb))
    for i, e in enumerate(basis.exprs):
        h[:, i] = _eval_checked(e, pts, i)
        for j in range(d):
            grad[:, i, j] = _eval_checked(basis.grads[i][j], pts, i)
        lap[:, i] = _eval_checked(basis.laplacians[i], pts, i)
    return h, grad, lap


def _eval_checked(e, pts, basis_index):
    try:
        vals = ex.evaluate(e, pts)
    except EvaluationError as err:
        raise EvaluationError(
            f"basis {basis_index} ({ex.render(e)!r}): {err}", bad_index=err.bad_index
        ) from err
    return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],))


def _monomial_powers(basis):
    """Per-basis integer power vectors when every expression is a plain
    monomial (no constants, no trig); None otherwise."""
    rows = []
    for e in basis.exprs:
        p = _powers_of(e, basis.dimension)
        if p is None:
            return None
        rows.append(p)
    return np.array(rows, dtype=int)


def _powers_of(e, d):
    if isinstance(e, ex.Var):
        p = np.zeros(d, dtype=int)
        p[e.index] = 1
        return p
    if isinstance(e, ex.Binary) and e.op == "mul":
        a = _powers_of(e.lhs, d)
        b = _powers_of(e.rhs, d)
        if a is None or b is None:
            return None
        return a + b
    return None


def _poly_tables(powers, pts):
    """Closed-form tables for monomial bases; linear cost in sample count."""
    n, d = pts.shape
    nb = powers.shape[0]
    pmax = int(powers.max())
    # pow_table[j][k] = x_j ** k, built by cumulative multiplication.
    pow_table = []
    for j in range(d):
        col = [np.ones(n), pts[:, j]]
        for _ in range(2, pmax + 1):
            col.append(col[-1] * pts[:, j])
        pow_table.append(col)

    def prod(pvec):
        out = None
        for j in range(d):
            k = int(pvec[j])
            if k == 0:
                continue
            out = pow_table[j][k] if out is None else out * pow_table[j][k]
        return np.ones(n) if out is None else out

    h = np.empty((n, nb))
    grad = np.zeros((n, nb, d))
    lap = np.zeros((n, nb))
    for i in range(nb):
        pv = powers[i]
        h[:, i] = prod(pv)
        for j in range(d):
            k = int(pv[j])
            if k >= 1:
                down = pv.copy()
                down[j] -= 1
                grad[:, i, j] = k * prod(down)
            if k >= 2:
                down2 = pv.copy()
                down2[j] -= 2
                lap[:, i] += k * (k - 1) * prod(down2)
    if not (np.isfinite(h).all() and np.isfinite(grad).all() and np.isfinite(lap).all()):
        bad = np.argwhere(~np.isfinite(h))
        where = f" at sample {bad[0][0]}, basis {bad[0][1]}" if bad.size else ""
        raise EvaluationError(f"non-finite monomial feature{where}")
    return h, grad, lap


def orthonormalize(basis: BasisSet, samples: SampleSet, pivot_tol: float = PIVOT_TOL) -> BasisSet:
    """Gram-Schmidt pass over gradient features; returns a BasisSet whose
    transform makes the empirical gradient Gram matrix ~ identity.

    Raises LinearDependenceError when a pivot's mean-square gradient norm
    falls below ``pivot_tol`` relative to the leading pivot.
    """
    nb = basis.size
    if samples.n <= nb:
        raise ValueError(f"need more than {nb} samples, got {samples.n}")
    g = np.array(features(basis, samples).grad_h)  # (n, nb, d), writable copy
    n = samples.n
    delta = np.eye(nb)
    lead = None
    for i in range(nb):
        msq = float(np.einsum("km,km->", g[:, i, :], g[:, i, :])) / n
        ref = lead if lead is not None else 1.0
        if msq < pivot_tol * ref:
            raise LinearDependenceError(i, ex.render(basis.exprs[i]))
        if lead is None:
            lead = msq
        norm = np.sqrt(msq)
        g[:, i, :] /= norm
        delta[i, :] /= norm
        if i + 1 < nb:
            coef = np.einsum("km,kjm->j", g[:, i, :], g[:, i + 1:, :]) / n
            g[:, i + 1:, :] -= coef[None, :, None] * g[:, i, :][:, None, :]
            delta[i + 1:, :] -= np.outer(coef, delta[i, :])
    transform = delta @ basis.transform
    return BasisSet(basis.exprs, basis.grads, basis.laplacians, transform, basis.dimension)
