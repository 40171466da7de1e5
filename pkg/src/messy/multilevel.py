"""Recursive mass splitting: fit a level, mask covered samples, recurse.

Masking accepts each sample with probability min(1, level_pdf / hist_pdf)
against an equi-width histogram of the samples still in play, so each
level claims the fraction of mass it already explains and the remainder
moves to the next level.  Masses are exact count ratios and sum to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import basis as bs
from . import expr as ex
from . import lagrange as lg
from .density import DataHint, LevelDensity, MessyDensity, full_support, intersect_support, normalize
from .errors import (
    DegenerateDataError,
    EvaluationError,
    LinearDependenceError,
    MaskConsistencyError,
    MessyError,
    MultilevelFailureError,
    NonIntegrableError,
    SingularHessianError,
)
from .samples import SampleSet

COVERAGE_FRACTION = 0.99
MIN_LEVEL_SAMPLES = 12
LEVEL_RETRIES = 50


def bin_count(n: int, dimension: int) -> int:
    """Equi-width bin count per dimension: ceil(3 n^(1/(d+2))), in [8, 128]."""
    raw = math.ceil(3.0 * n ** (1.0 / (dimension + 2)))
    return int(min(128, max(8, raw)))


@dataclass
class HistogramDensity:
    edges: tuple            # per-dimension edge arrays
    cells: dict             # occupied cell index tuple -> probability
    support: np.ndarray     # (d, 2)
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return len(self.edges)

    @property
    def bins(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    @property
    def probabilities(self) -> np.ndarray:
        """Dense probability array (practical for d <= 2)."""
        if self._dense is None:
            dense = np.zeros(self.bins)
            for idx, p in self.cells.items():
                dense[idx] = p
            self._dense = dense
        return self._dense

    def cell_index(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = np.empty((pts.shape[0], self.dimension), dtype=int)
        inside = np.ones(pts.shape[0], dtype=bool)
        for j, e in enumerate(self.edges):
            width = e[1] - e[0]
            k = np.floor((pts[:, j] - e[0]) / width).astype(int)
            k = np.clip(k, 0, len(e) - 2)
            idx[:, j] = k
            inside &= (pts[:, j] >= e[0]) & (pts[:, j] <= e[-1])
        return idx, inside

    def pdf(self, pts):
        idx, inside = self.cell_index(pts)
        out = np.zeros(idx.shape[0])
        if self.dimension <= 2:
            dense = self.probabilities
            sel = tuple(idx[inside].T)
            out[inside] = dense[sel]
        else:
            vals = np.array([self.cells.get(tuple(row), 0.0) for row in idx[inside]])
            out[inside] = vals
        return out / self.cell_volume

    def log_pdf(self, pts):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(pts))

    def draw(self, n: int, rng) -> SampleSet:
        keys = sorted(self.cells)
        probs = np.array([self.cells[k] for k in keys])
        counts = rng.multinomial(n, probs / probs.sum())
        rows = []
        for key, cnt in zip(keys, counts):
            if cnt == 0:
                continue
            lo = np.array([self.edges[j][key[j]] for j in range(self.dimension)])
            hi = np.array([self.edges[j][key[j] + 1] for j in range(self.dimension)])
            rows.append(lo + (hi - lo) * rng.random((cnt, self.dimension)))
        out = np.concatenate(rows, axis=0)
        return SampleSet(out[rng.permutation(out.shape[0])], source="histogram")


def histogram(samples: SampleSet, bins: int | None = None) -> HistogramDensity:
    """Equi-width histogram over the sample bounding box."""
    if samples.n < 10:
        raise ValueError(f"need at least 10 samples, got {samples.n}")
    d = samples.dimension
    bins = bins if bins is not None else bin_count(samples.n, d)
    lo = samples.column_min()
    hi = samples.column_max()
    if np.any(hi <= lo):
        j = int(np.argmax(hi <= lo))
        raise DegenerateDataError(f"all samples equal along dimension {j}")
    edges = tuple(np.linspace(lo[j], hi[j], bins + 1) for j in range(d))
    idx = np.empty((samples.n, d), dtype=int)
    for j in range(d):
        width = edges[j][1] - edges[j][0]
        k = np.floor((samples.values[:, j] - lo[j]) / width).astype(int)
        idx[:, j] = np.clip(k, 0, bins - 1)
    cells: dict = {}
    for row in map(tuple, idx):
        cells[row] = cells.get(row, 0) + 1
    cells = {k: v / samples.n for k, v in cells.items()}
    return HistogramDensity(edges=edges, cells=cells,
                            support=np.column_stack([lo, hi]))


def mask(level: LevelDensity, hist: HistogramDensity, samples: SampleSet, rng):
    """Split samples into (masked, remaining) by accepting each with
    probability min(1, level_pdf / hist_pdf); returns the masked fraction."""
    log_l = level.log_pdf(samples.values)
    log_h = hist.log_pdf(samples.values)
    _, inside = hist.cell_index(samples.values)
    bad = inside & ~np.isfinite(log_h)
    if bad.any():
        raise MaskConsistencyError(
            f"histogram density is zero at in-range sample {int(np.argmax(bad))}"
        )
    with np.errstate(invalid="ignore"):
        ratio = np.exp(np.minimum(log_l - log_h, 0.0))
    ratio[~np.isfinite(log_h)] = 0.0
    u = rng.random(samples.n)
    chosen = ratio > u
    masked = samples.subset(chosen) if chosen.any() else None
    remaining = samples.subset(~chosen) if (~chosen).any() else None
    return masked, remaining, float(chosen.sum() / samples.n)


@dataclass
class LevelRecord:
    level: int
    exprs: tuple          # rendered basis text
    lam: list
    mass: float
    remaining: int        # samples left after this level
    cond: float
    raw_cond: float
    log_z: float
    support: list


@dataclass
class LevelTrace:
    records: list = field(default_factory=list)

    @property
    def total_levels(self) -> int:
        return len(self.records)

    def to_dict(self):
        return {
            "total_levels": self.total_levels,
            "levels": [
                {
                    "level": r.level,
                    "basis": list(r.exprs),
                    "lambda": list(r.lam),
                    "mass": r.mass,
                    "remaining": r.remaining,
                    "cond": r.cond,
                    "raw_cond": r.raw_cond,
                    "log_z": r.log_z,
                    "support": r.support,
                }
                for r in self.records
            ],
        }


def _effective_support(data: SampleSet, config) -> np.ndarray:
    if not getattr(config, "bounded", False):
        return full_support(data.dimension)
    box = data.bounding_box()
    if getattr(config, "bounds", None) is not None:
        box = intersect_support(box, np.asarray(config.bounds, dtype=float))
    return box


def _fit_level(exprs, data: SampleSet, config, allow_bounded_fallback=False):
    """One level: build, orthonormalize, solve, normalize.

    When the exponent is non-integrable on an unbounded support and the
    basis cannot be redrawn, the level falls back to the data-supported
    box (the piecewise treatment), which is always integrable.
    """
    raw = bs.build(exprs, data.dimension)
    raw_feats = bs.features(raw, data)
    raw_cond = float(np.linalg.cond(lg.assemble_hessian(raw_feats)))
    work = bs.orthonormalize(raw, data) if getattr(config, "use_orthonormalization", True) else raw
    feats = bs.features(work, data) if work is not raw else raw_feats
    solve = lg.solve_lambda(lg.assemble_hessian(feats), lg.laplacian_moment(feats))
    support = _effective_support(data, config)
    try:
        log_z = normalize(work, solve.lam, support, data=data)
    except NonIntegrableError:
        if not allow_bounded_fallback or np.isfinite(support).all():
            raise
        support = _bounded_support(data, config)
        log_z = normalize(work, solve.lam, support, data=data)
    level = LevelDensity(
        basis=work,
        lam=solve.lam,
        log_z=log_z,
        support=support,
        mass=0.0,
        hint=DataHint.from_samples(data),
    )
    return level, solve, raw_cond


def _bounded_support(data: SampleSet, config) -> np.ndarray:
    box = data.bounding_box()
    if getattr(config, "bounds", None) is not None:
        box = intersect_support(box, np.asarray(config.bounds, dtype=float))
    return box


def fit_multilevel(samples: SampleSet, basis_source, config, rng=None):
    """Mass-splitting loop; returns (MessyDensity, LevelTrace).

    ``basis_source(level, data, rng)`` supplies the basis expressions for
    each level.  A level whose fit is non-integrable, dependent, or masks
    nothing is redrawn up to LEVEL_RETRIES times before the whole fit is
    declared failed.
    """
    if rng is None:
        rng = np.random.default_rng(getattr(config, "seed", 0))
    n_total = samples.n
    n_levels = getattr(config, "n_levels", 5)
    if not getattr(config, "use_multilevel", True):
        n_levels = 1
    levels: list[LevelDensity] = []
    trace = LevelTrace()
    remaining = samples
    covered = 0
    for l in range(1, n_levels + 1):
        degenerate = False
        if remaining is not None and remaining.n >= MIN_LEVEL_SAMPLES:
            try:
                hist = histogram(remaining)
            except DegenerateDataError:
                degenerate = True
        if remaining is None or remaining.n < MIN_LEVEL_SAMPLES or degenerate:
            # too few (or collapsed) samples for another level: fold them
            # into the last fitted one so masses still sum to one
            if not levels:
                raise MultilevelFailureError(
                    f"only {0 if remaining is None else remaining.n} usable samples"
                )
            extra = 0 if remaining is None else remaining.n
            levels[-1].mass += extra / n_total
            trace.records[-1].mass = levels[-1].mass
            trace.records[-1].remaining = 0
            covered = n_total
            break
        redrawable = getattr(basis_source, "redrawable", True)
        last_error: Exception | None = None
        outcome = None
        for _ in range(LEVEL_RETRIES):
            try:
                exprs = basis_source(l, remaining, rng)
                level, solve, raw_cond = _fit_level(
                    exprs, remaining, config,
                    allow_bounded_fallback=not redrawable,
                )
            except (NonIntegrableError, LinearDependenceError,
                    SingularHessianError, EvaluationError, MessyError) as err:
                last_error = err
                continue
            masked, rest, _ = mask(level, hist, remaining, rng)
            if masked is None:
                last_error = MultilevelFailureError("level masked zero samples")
                continue
            outcome = (level, solve, raw_cond, masked, rest)
            break
        if outcome is None:
            raise MultilevelFailureError(
                f"level {l}: no admissible fit within {LEVEL_RETRIES} draws "
                f"(last error: {last_error})"
            )
        level, solve, raw_cond, masked, rest = outcome
        covered += masked.n
        final = (
            l == n_levels
            or rest is None
            or (n_total - covered) < (1.0 - COVERAGE_FRACTION) * n_total
        )
        if final:
            # terminal level claims everything still in play
            level.mass = remaining.n / n_total
            rest = None
            covered = n_total
        else:
            level.mass = masked.n / n_total
        levels.append(level)
        trace.records.append(
            LevelRecord(
                level=l,
                exprs=tuple(ex.render(e, level.dimension) for e in level.basis.exprs),
                lam=[float(v) for v in level.lam],
                mass=level.mass,
                remaining=0 if rest is None else rest.n,
                cond=solve.cond,
                raw_cond=raw_cond,
                log_z=level.log_z,
                support=[[float(a), float(b)] for a, b in level.support],
            )
        )
        remaining = rest
        if final:
            break
    # pin the mass vector to sum exactly one; counts already guarantee it
    # up to rounding in the divisions
    partial = sum(lv.mass for lv in levels[:-1])
    levels[-1].mass = 1.0 - partial
    trace.records[-1].mass = levels[-1].mass
    return MessyDensity(levels=levels, mode=getattr(config, "mode", "p")), trace
