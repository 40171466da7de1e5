"""Monte Carlo basis search and the end-to-end estimation pipeline.

Iteration 1 fits fixed polynomial bases (the "P" estimate); later
iterations draw random symbolic candidate bases, rejecting draws whose
raw gradient Gram matrix is ill-conditioned, and every iteration runs
the multilevel fit, a resampling step, and the cross-entropy moment
correction.  The final "S" estimate is the iteration minimizing the
negative mean log-likelihood score.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import basis as bs
from . import expr as ex
from . import lagrange as lg
from .density import (
    DataHint,
    LevelDensity,
    MessyDensity,
    draw,
    intersect_support,
    kl_criterion_details,
    normalize,
    sample_moments,
)
from .errors import (
    LinearDependenceError,
    MessyError,
    MessyFailureError,
    NonIntegrableError,
    SearchExhaustedError,
)
from .multilevel import fit_multilevel
from .mxed import mxed_correct
from .samples import SampleSet

DEFAULT_NB_CHOICES = tuple(range(2, 9))


@dataclass
class SearchConfig:
    """Knobs for the estimation pipeline; defaults follow the benchmark
    configuration (ten iterations, basis counts drawn from 2..8,
    condition-number rejection at 1e6)."""

    mode: str = "s"
    max_order: int = 4                      # highest admissible growth order
    nb_choices: tuple = DEFAULT_NB_CHOICES  # candidate basis-count pool
    n_iters: int = 10
    cond_threshold: float = 1e6
    ops: tuple = ("add", "sub", "mul")
    funcs: tuple = ("sin", "cos")
    seed: int = 0
    bounded: bool = False
    bounds: tuple | None = None             # ((lo, hi), ...) per dimension
    n_levels: int = 5
    mxed_order: int | None = None           # correction-moment order, default max_order
    mxed_tol: float = 1e-6
    use_mxed: bool = True
    use_multilevel: bool = True
    use_orthonormalization: bool = True
    holdout: bool = False                   # score on a 20% split instead
    candidate_retries: int = 50
    draw_count: int | None = None           # prior draw size, default n

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in ("p", "s"):
            raise ValueError(f"mode must be 'p' or 's', got {self.mode!r}")
        if self.max_order < 2 or self.max_order % 2 != 0:
            raise ValueError("max_order must be even and >= 2")
        self.nb_choices = tuple(int(v) for v in self.nb_choices)
        if not self.nb_choices or any(not 1 <= v <= 32 for v in self.nb_choices):
            raise ValueError("nb_choices must be a non-empty subset of 1..32")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.bounds is not None:
            self.bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)


@dataclass
class Candidate:
    exprs: tuple
    raw_cond: float
    accepted: bool
    basis: object = None          # orthonormalized BasisSet when accepted
    density: object = None
    kl_score: float = math.inf
    iteration: int = 0

    @property
    def n_basis(self) -> int:
        return len(self.exprs)


def sample_candidate(rng, config: SearchConfig, samples: SampleSet) -> Candidate:
    """Draw an admissible random basis: distinct expressions, raw Gram
    condition number below the threshold, orthonormalizable."""
    d = samples.dimension
    for _ in range(config.candidate_retries):
        nb = int(config.nb_choices[rng.integers(len(config.nb_choices))])
        exprs = []
        for _ in range(nb):
            for _ in range(20):
                e = ex.random_expr(rng, d, config.max_order, config.ops, config.funcs)
                if e not in exprs:
                    exprs.append(e)
                    break
            else:
                break
        if len(exprs) != nb:
            continue
        raw = bs.build(exprs, d)
        feats = bs.features(raw, samples)
        if not np.isfinite(feats.grad_h).all():
            continue
        cond = float(np.linalg.cond(lg.assemble_hessian(feats)))
        if not math.isfinite(cond) or cond > config.cond_threshold:
            continue
        try:
            ortho = bs.orthonormalize(raw, samples)
        except LinearDependenceError:
            continue
        return Candidate(exprs=tuple(exprs), raw_cond=cond, accepted=True, basis=ortho)
    raise SearchExhaustedError(
        f"no acceptable candidate in {config.candidate_retries} draws"
    )


@dataclass
class IterationResult:
    iteration: int
    ok: bool
    density: object = None
    trace: object = None
    kl_score: float = math.inf
    n_basis: int = 0
    raw_cond: float = math.nan
    basis_kind: str = "poly"
    exprs: tuple = ()
    newton_iterations: int | None = None
    newton_grad_norm: float | None = None
    zero_support_hits: int = 0
    error: str | None = None
    seconds: float = 0.0


@dataclass
class MessyResult:
    messy_p: MessyDensity | None
    messy_s: MessyDensity | None
    iterations: list = field(default_factory=list)
    config: SearchConfig | None = None

    def report(self) -> dict:
        out = {
            "mode": self.config.mode if self.config else None,
            "iterations": [
                {
                    "iteration": r.iteration,
                    "ok": r.ok,
                    "kl": None if not math.isfinite(r.kl_score) else r.kl_score,
                    "n_basis": r.n_basis,
                    "raw_cond": None if math.isnan(r.raw_cond) else r.raw_cond,
                    "basis_kind": r.basis_kind,
                    "basis": [ex.render(e) for e in r.exprs],
                    "newton_iterations": r.newton_iterations,
                    "newton_grad_norm": r.newton_grad_norm,
                    "zero_support_hits": r.zero_support_hits,
                    "levels": r.trace.to_dict() if r.trace is not None else None,
                    "error": r.error,
                }
                for r in self.iterations
            ],
        }
        if self.messy_s is not None:
            out["selected_iteration"] = next(
                r.iteration for r in self.iterations
                if r.ok and r.density is self.messy_s
            )
        return out


def select_best(results) -> object:
    """Minimum score; ties broken by fewer basis functions, then lower
    raw condition number, then iteration order."""
    scored = [r for r in results if r.ok and math.isfinite(r.kl_score)]
    if not scored:
        raise MessyFailureError([getattr(r, "error", None) for r in results])
    best = min(
        scored,
        key=lambda r: (
            r.kl_score,
            r.n_basis,
            r.raw_cond if not math.isnan(r.raw_cond) else math.inf,
            r.iteration,
        ),
    )
    return best


def _global_box(samples: SampleSet, config: SearchConfig):
    if not config.bounded:
        return None
    box = samples.bounding_box()
    if config.bounds is not None:
        box = intersect_support(box, np.asarray(config.bounds, dtype=float))
    return box


def _renormalized(density: MessyDensity, new_levels, log_mass_shift) -> MessyDensity:
    """Rebuild a mixture from per-level log-mass shifts, pinning the mass
    vector to sum exactly one."""
    log_m = np.array([
        (math.log(lv.mass) if lv.mass > 0 else -math.inf) + shift
        for lv, shift in zip(new_levels, log_mass_shift)
    ])
    m = np.exp(log_m - log_m.max())
    m /= m.sum()
    m[int(np.argmax(m))] += 1.0 - m.sum()
    for lv, mass in zip(new_levels, m):
        lv.mass = float(mass)
    return MessyDensity(levels=list(new_levels), mode=density.mode)


def truncate_density(density: MessyDensity, box) -> MessyDensity:
    """Restrict every level to the box and renormalize masses."""
    new_levels = []
    shifts = []
    changed = False
    for lv in density.levels:
        support = intersect_support(lv.support, box)
        if np.array_equal(support, lv.support):
            new_levels.append(lv)
            shifts.append(0.0)
            continue
        changed = True
        log_z = normalize(lv.basis, lv.lam, support, data=lv.hint)
        new_levels.append(
            LevelDensity(basis=lv.basis, lam=lv.lam, log_z=log_z,
                         support=support, mass=lv.mass, hint=lv.hint)
        )
        shifts.append(log_z - lv.log_z)
    if not changed:
        return density
    return _renormalized(density, new_levels, shifts)


def apply_correction(density: MessyDensity, exprs, coeffs) -> MessyDensity:
    """Multiply the density by exp(sum coeffs * exprs), renormalizing each
    level and the mass vector.

    A corrected exponent may stop being integrable on an unbounded
    support (the tilt can flip the leading coefficient's sign); such a
    level falls back to its data-supported box.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    new_levels = []
    shifts = []
    for lv in density.levels:
        new_exprs = tuple(lv.basis.exprs) + tuple(exprs)
        new_basis = bs.build(new_exprs, lv.dimension)
        new_lam = np.concatenate([lv.raw_coefficients, coeffs])
        support = lv.support
        try:
            log_z = normalize(new_basis, new_lam, support, data=lv.hint)
        except NonIntegrableError:
            if lv.hint is None or np.isfinite(support).all():
                raise
            support = intersect_support(support, lv.hint.box)
            log_z = normalize(new_basis, new_lam, support, data=lv.hint)
        new_levels.append(
            LevelDensity(basis=new_basis, lam=new_lam, log_z=log_z,
                         support=support, mass=lv.mass, hint=lv.hint)
        )
        shifts.append(log_z - lv.log_z)
    return _renormalized(density, new_levels, shifts)


def _top_up_draws(y: SampleSet, density: MessyDensity, box, n: int, rng) -> SampleSet:
    """Drop draws outside the box and redraw until n remain."""
    keep = np.ones(y.n, dtype=bool)
    for j in range(y.dimension):
        keep &= (y.values[:, j] >= box[j, 0]) & (y.values[:, j] <= box[j, 1])
    vals = y.values[keep]
    while vals.shape[0] < n:
        extra = draw(density, n - vals.shape[0] + 32, rng).values
        ok = np.ones(extra.shape[0], dtype=bool)
        for j in range(extra.shape[1]):
            ok &= (extra[:, j] >= box[j, 0]) & (extra[:, j] <= box[j, 1])
        vals = np.concatenate([vals, extra[ok]], axis=0)
    return SampleSet(vals[:n], source=y.source)


def _poly_source(exprs):
    def source(level, data, rng):
        return exprs

    source.redrawable = False
    return source


def _symbolic_source(config, first_candidate):
    state = {"first": True}

    def source(level, data, rng):
        if state["first"]:
            state["first"] = False
            return list(first_candidate.exprs)
        cand = sample_candidate(rng, config, data)
        return list(cand.exprs)

    source.redrawable = True
    return source


def messy_fit(samples: SampleSet, config: SearchConfig) -> MessyResult:
    """Run the full pipeline; deterministic given (samples, config).

    Returns the polynomial-basis estimate (iteration 1), the best-scoring
    estimate over all iterations, and per-iteration diagnostics.  Raises
    MessyFailureError only when every iteration fails.
    """
    if samples.n < 50:
        raise ValueError(f"need at least 50 samples, got {samples.n}")
    d = samples.dimension
    mxed_order = config.mxed_order if config.mxed_order is not None else config.max_order
    r_exprs = ex.poly_basis(d, mxed_order)
    if config.holdout:
        rng_split = np.random.default_rng([config.seed, 77])
        perm = rng_split.permutation(samples.n)
        cut = max(1, int(0.8 * samples.n))
        fit_samples = samples.subset(perm[:cut])
        score_samples = samples.subset(perm[cut:])
    else:
        fit_samples = samples
        score_samples = samples
    mu_r, _ = sample_moments(fit_samples, r_exprs)
    box = _global_box(fit_samples, config)
    n_iters = 1 if config.mode == "p" else config.n_iters
    results: list[IterationResult] = []
    for i in range(1, n_iters + 1):
        rng = np.random.default_rng([config.seed, i])
        started = time.perf_counter()
        try:
            results.append(
                _run_iteration(i, fit_samples, score_samples, mu_r, r_exprs,
                               box, config, rng)
            )
        except MessyError as err:
            results.append(IterationResult(
                iteration=i, ok=False, error=f"{type(err).__name__}: {err}",
            ))
        results[-1].seconds = time.perf_counter() - started
    ok = [r for r in results if r.ok]
    if not ok:
        raise MessyFailureError([r.error for r in results])
    messy_p = results[0].density if results[0].ok else None
    best = select_best(results)
    messy_s = best.density
    if messy_p is not None:
        messy_p.mode = "p"
    if messy_s is not messy_p:
        messy_s.mode = "s"
    return MessyResult(messy_p=messy_p, messy_s=messy_s, iterations=results,
                       config=config)


def _run_iteration(i, fit_samples, score_samples, mu_r, r_exprs, box, config, rng):
    d = fit_samples.dimension
    if i == 1:
        exprs = ex.poly_basis(d, config.max_order)
        source = _poly_source(exprs)
        cand = Candidate(exprs=tuple(exprs), raw_cond=math.nan, accepted=True)
        kind = "poly"
    else:
        cand = sample_candidate(rng, config, fit_samples)
        source = _symbolic_source(config, cand)
        kind = "symbolic"
    density, trace = fit_multilevel(fit_samples, source, config, rng)
    newton_iters = None
    newton_grad = None
    if config.use_mxed:
        n_prior = config.draw_count or max(fit_samples.n, 10 * len(r_exprs))
        y = draw(density, n_prior, rng)
        if box is not None:
            density = truncate_density(density, box)
            y = _top_up_draws(y, density, box, n_prior, rng)
        corr = mxed_correct(y, mu_r, r_exprs, tol=config.mxed_tol)
        density = apply_correction(density, r_exprs, corr.lam)
        newton_iters = corr.state.iterations
        newton_grad = float(np.max(np.abs(corr.state.gradient)))
    elif box is not None:
        density = truncate_density(density, box)
    kl, zero_hits = kl_criterion_details(density, score_samples)
    density.kl_score = kl
    return IterationResult(
        iteration=i, ok=True, density=density, trace=trace, kl_score=kl,
        n_basis=cand.n_basis, raw_cond=cand.raw_cond, basis_kind=kind,
        exprs=cand.exprs, newton_iterations=newton_iters,
        newton_grad_norm=newton_grad, zero_support_hits=zero_hits,
    )
