"""Log-domain quadrature and small numeric utilities."""
from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import QuadratureWarning


@lru_cache(maxsize=32)
def _gauss_rule(order):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def panel_nodes(lo, hi, panels, order):
    """Composite Gauss-Legendre nodes/weights on [lo, hi]."""
    base_x, base_w = _gauss_rule(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * base_x[None, :]).ravel()
    weights = (half[:, None] * base_w[None, :]).ravel()
    return nodes, weights


def grid_nodes(box, panels, order):
    """Tensor-product quadrature over a (d, 2) box; d in {1, 2}."""
    box = np.asarray(box, dtype=float)
    if box.shape[0] == 1:
        x, w = panel_nodes(box[0, 0], box[0, 1], panels, order)
        return x[:, None], w
    x0, w0 = panel_nodes(box[0, 0], box[0, 1], panels, order)
    x1, w1 = panel_nodes(box[1, 0], box[1, 1], panels, order)
    pts = np.column_stack([np.repeat(x0, x1.size), np.tile(x1, x0.size)])
    return pts, np.outer(w0, w1).ravel()


def log_integral_exp(expo_fn, box, rel_tol=1e-6, order=None, start_panels=None,
                     max_doublings=None, warn=True):
    """log of integral of exp(expo_fn(x)) over a bounded box, d <= 2.

    Refines by doubling the panel count until successive estimates agree
    to ``rel_tol`` in the log; warns if the cap is reached first.
    """
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    if d > 2:
        raise ValueError("quadrature only supports d <= 2")
    if order is None:
        order = 32 if d == 1 else 16
    if start_panels is None:
        start_panels = 8 if d == 1 else 4
    if max_doublings is None:
        max_doublings = 8 if d == 1 else 4
    panels = start_panels
    prev = _log_int(expo_fn, box, panels, order)
    for _ in range(max_doublings):
        panels *= 2
        cur = _log_int(expo_fn, box, panels, order)
        if abs(cur - prev) <= rel_tol * (1.0 + abs(cur)):
            return cur
        prev = cur
    if warn:
        warnings.warn(
            f"quadrature not converged to {rel_tol} after {panels} panels",
            QuadratureWarning,
        )
    return prev


def _log_int(expo_fn, box, panels, order):
    pts, w = grid_nodes(box, panels, order)
    vals = np.asarray(expo_fn(pts), dtype=float)
    return float(logsumexp(vals, b=w))


def log_expectation(expo_fn, integrand_fn, box, panels=512, order=16):
    """E[g(X)] under the density exp(expo)/Z restricted to the box.

    Fixed-resolution rule; callers pick ``panels`` large enough for the
    structure at hand.  Returns an array matching integrand_fn's output
    columns.
    """
    box = np.asarray(box, dtype=float)
    if box.shape[0] == 2:
        panels = max(16, int(round(panels ** 0.5)))
    pts, w = grid_nodes(box, panels, order)
    expo = np.asarray(expo_fn(pts), dtype=float)
    shift = expo.max()
    p = w * np.exp(expo - shift)
    z = p.sum()
    g = np.asarray(integrand_fn(pts), dtype=float)
    if g.ndim == 1:
        return float((p * g).sum() / z)
    return (p[:, None] * g).sum(axis=0) / z


def logmeanexp(values, axis=None):
    values = np.asarray(values, dtype=float)
    n = values.shape[axis] if axis is not None else values.size
    return logsumexp(values, axis=axis) - np.log(n)


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
