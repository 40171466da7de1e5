"""Benchmark cases, sample generation, metrics, reports, and file I/O.

All randomness flows from explicit integer seeds through seed-sequence
lists, so a repeated invocation reproduces reports byte for byte (wall
times excluded unless timing is on).
"""
from __future__ import annotations

import json
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import basis as bs
from . import expr as ex
from . import lagrange as lg
from .baseline import kde_fit
from .density import (
    DataHint,
    LevelDensity,
    MessyDensity,
    density_moments,
    draw,
    kl_criterion_details,
    normalize,
    realizability_margin,
    sample_moments,
)
from .errors import CsvParseError, MessyError
from .multilevel import histogram
from .samples import SampleSet
from .search import SearchConfig, messy_fit
from .mxed import mxed_correct

MOMENT_ERROR_EPS = 1e-9
MOMENT_ORDERS = (1, 2, 3, 4, 5, 6)
DEFAULT_REPLICATES = 25

# Two-Gaussian mixture whose standardized moments are (0, 1, -2.10, 5.42);
# parameters solved once by moment matching and frozen (see tests for the
# re-derivation oracle).
LIMIT_REAL_MIX = {
    "weight": 0.137623963897097,
    "mu1": -2.50174500887836,
    "mu2": 0.399245863019939,
    "sigma": 0.0344768744890317,
}

CASE_DEFAULTS = {
    "bimodal": {"max_order": 4, "bounded": False, "dimension": 1},
    "limit_real": {"max_order": 4, "bounded": False, "dimension": 1},
    "exponential": {"max_order": 2, "bounded": True, "dimension": 1,
                    "bounds": ((0.0, math.inf),)},
    "gauss2d": {"max_order": 2, "bounded": False, "dimension": 2},
    "gammaexp": {"max_order": 2, "bounded": True, "dimension": 2,
                 "bounds": ((0.0, math.inf), (0.0, math.inf))},
}

_GAUSS_ND = re.compile(r"^gaussnd[:\-](\d+)$", re.IGNORECASE)


def case_dimension(case: str) -> int:
    m = _GAUSS_ND.match(case)
    if m:
        return int(m.group(1))
    if case not in CASE_DEFAULTS:
        raise ValueError(f"unknown case {case!r}")
    return CASE_DEFAULTS[case]["dimension"]


def gen_samples(case: str, n: int, seed: int) -> SampleSet:
    """Seeded sample generation for the benchmark distributions."""
    rng = np.random.default_rng(seed)
    m = _GAUSS_ND.match(case)
    if m:
        d = int(m.group(1))
        mean = rng.normal(0.0, math.sqrt(0.5), size=d)
        u = np.tril(rng.normal(0.0, math.sqrt(0.5), size=(d, d)))
        cov = np.eye(d) + u @ u.T
        chol = np.linalg.cholesky(cov)
        vals = mean + rng.standard_normal((n, d)) @ chol.T
        return SampleSet(vals, source=case, seed=seed)
    if case == "bimodal":
        comp = rng.random(n) < 0.5
        vals = np.where(
            comp,
            rng.normal(-0.6, 0.3, size=n),
            rng.normal(0.7, 0.5, size=n),
        )
        return SampleSet(vals, source=case, seed=seed)
    if case == "limit_real":
        p = LIMIT_REAL_MIX
        comp = rng.random(n) < p["weight"]
        vals = np.where(
            comp,
            rng.normal(p["mu1"], p["sigma"], size=n),
            rng.normal(p["mu2"], p["sigma"], size=n),
        )
        return SampleSet(vals, source=case, seed=seed)
    if case == "exponential":
        return SampleSet(rng.exponential(1.0, size=n), source=case, seed=seed)
    if case == "gauss2d":
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        vals = rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov).T
        return SampleSet(vals, source=case, seed=seed)
    if case == "gammaexp":
        x1 = rng.exponential(1.0 / 2.0, size=n)
        x2 = rng.gamma(3.0, 0.5, size=n)
        return SampleSet(np.column_stack([x1, x2]), source=case, seed=seed)
    raise ValueError(f"unknown case {case!r}")


def case_config(case: str, seed: int = 0, **overrides) -> SearchConfig:
    """SearchConfig preset for a benchmark case."""
    m = _GAUSS_ND.match(case)
    if m:
        base = {"max_order": 2, "bounded": False}
    else:
        entry = CASE_DEFAULTS[case]
        base = {
            "max_order": entry["max_order"],
            "bounded": entry["bounded"],
            "bounds": entry.get("bounds"),
        }
    base.update(overrides)
    return SearchConfig(seed=seed, **base)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

METHOD_NAMES = ("kde", "hist", "mxed_oracle", "messy_p", "messy_s", "lambda_solve")


def _gaussian_prior_density(samples: SampleSet, order: int) -> MessyDensity:
    """Moment-matched Gaussian as an exponential-family level (quadratic
    exponent), padded with zero coefficients up to the given order."""
    d = samples.dimension
    cov = np.atleast_2d(np.cov(samples.values, rowvar=False))
    prec = np.linalg.inv(cov)
    mean = np.array(samples.mean)
    exprs = ex.poly_basis(d, max(2, order))
    coeffs = np.zeros(len(exprs))
    lin = prec @ mean
    for i, e in enumerate(exprs):
        powers = bs._powers_of(e, d)
        if powers is None or powers.sum() > 2:
            continue
        if powers.sum() == 1:
            j = int(np.argmax(powers))
            coeffs[i] = lin[j]
        else:
            idx = np.flatnonzero(powers)
            if len(idx) == 1:
                j = idx[0]
                coeffs[i] = -0.5 * prec[j, j]
            else:
                j, k = idx
                coeffs[i] = -prec[j, k]
    basis = bs.build(exprs, d)
    support = np.column_stack([np.full(d, -np.inf), np.full(d, np.inf)])
    log_z = normalize(basis, coeffs, support, data=samples)
    return MessyDensity(
        levels=[LevelDensity(basis=basis, lam=coeffs, log_z=log_z,
                             support=support, mass=1.0,
                             hint=DataHint.from_samples(samples))],
        mode="p",
    )


def _fit_mxed_oracle(samples: SampleSet, config: SearchConfig, seed: int):
    """Gaussian-prior cross-entropy fit used as the parametric baseline."""
    from .search import apply_correction, truncate_density, _global_box

    r_exprs = ex.poly_basis(samples.dimension, config.max_order)
    mu, _ = sample_moments(samples, r_exprs)
    prior = _gaussian_prior_density(samples, config.max_order)
    box = _global_box(samples, config)
    rng = np.random.default_rng([seed, 19])
    n_prior = max(samples.n, 10 * len(r_exprs))
    y = draw(prior, n_prior, rng)
    if box is not None:
        from .search import _top_up_draws

        prior = truncate_density(prior, box)
        y = _top_up_draws(y, prior, box, n_prior, rng)
    corr = mxed_correct(y, mu, r_exprs, tol=config.mxed_tol)
    density = apply_correction(prior, r_exprs, corr.lam)
    return density, {
        "newton_iterations": corr.state.iterations,
        "newton_grad_norm": float(np.max(np.abs(corr.state.gradient))),
    }


def _solve_multipliers(samples: SampleSet, order: int):
    """Orthonormalize-and-solve stage on a polynomial basis; this is the
    piece whose cost is linear in the sample count."""
    exprs = ex.poly_basis(samples.dimension, order)
    raw = bs.build(exprs, samples.dimension)
    ortho = bs.orthonormalize(raw, samples)
    feats = bs.features(ortho, samples)
    solve = lg.solve_lambda(lg.assemble_hessian(feats), lg.laplacian_moment(feats))
    return ortho, solve


def run_method(method: str, samples: SampleSet, config: SearchConfig, seed: int):
    """Fit one method; returns (density_or_None, diagnostics, fit_seconds)."""
    t0 = time.perf_counter()
    diag: dict = {}
    density = None
    if method == "kde":
        density = kde_fit(samples, seed=seed)
        diag["bandwidth"] = density.bandwidth
    elif method == "hist":
        density = histogram(samples)
    elif method in ("mxed", "mxed_oracle"):
        density, diag = _fit_mxed_oracle(samples, config, seed)
    elif method in ("messy_p", "messy_s"):
        result = messy_fit(samples, config)
        density = result.messy_p if method == "messy_p" else result.messy_s
        if density is None:
            raise MessyError("polynomial iteration failed")
        pick = [r for r in result.iterations if r.density is density]
        if pick:
            diag["newton_iterations"] = pick[0].newton_iterations
            diag["cond"] = None
            if pick[0].trace is not None:
                diag["cond"] = max(r.cond for r in pick[0].trace.records)
                diag["raw_cond"] = max(r.raw_cond for r in pick[0].trace.records)
            diag["levels"] = pick[0].trace.to_dict() if pick[0].trace else None
            diag["expressions"] = [
                render_density_exponents(density)
            ]
        diag["kl_by_iteration"] = [
            r.kl_score if math.isfinite(r.kl_score) else None
            for r in result.iterations
        ]
    elif method == "lambda_solve":
        _, solve = _solve_multipliers(samples, config.max_order)
        diag["cond"] = solve.cond
    else:
        raise ValueError(f"unknown method {method!r}")
    seconds = time.perf_counter() - t0
    return density, diag, seconds


def render_density_exponents(density: MessyDensity) -> list:
    """Appendix-style text of each level's exponent."""
    out = []
    for lv in density.levels:
        terms = [(c, e) for e, c in lv.exponent_terms() if c != 0.0]
        tree = None
        for c, e in terms:
            piece = ex.mul(ex.const(c), e)
            tree = piece if tree is None else ex.add(tree, piece)
        out.append(ex.render(tree if tree is not None else ex.const(0.0),
                             lv.dimension))
    return out


# ---------------------------------------------------------------------------
# Benchmark driver
# ---------------------------------------------------------------------------

def _metrics(density, samples: SampleSet, seed: int) -> dict:
    kl, zero_hits = kl_criterion_details(density, samples)
    d = samples.dimension
    per_order_err = []
    mom_rng = np.random.default_rng([seed, 404])
    method_moments = {}
    for j in range(d):
        exprs = [ex.monomial([k if m == j else 0 for m in range(d)])
                 for k in MOMENT_ORDERS]
        mu_s, _ = sample_moments(samples, exprs)
        mu_m = density_moments(density, exprs, rng=mom_rng)
        method_moments[j] = (mu_m, mu_s)
    for oi, order in enumerate(MOMENT_ORDERS):
        errs = [
            abs(method_moments[j][0][oi] - method_moments[j][1][oi])
            / (abs(method_moments[j][1][oi]) + MOMENT_ERROR_EPS)
            for j in range(d)
        ]
        per_order_err.append(float(np.mean(errs)))
    return {
        "kl": kl,
        "zero_support_hits": zero_hits,
        "moment_rel_err_low": per_order_err[:4],
        "moment_rel_err_high": per_order_err[4:6],
    }


def _run_single(task):
    case, n, rep, method, seed, config_overrides, timing = task
    sample_seed = _derive_seed([seed, _case_tag(case), n, rep])
    samples = gen_samples(case, n, sample_seed)
    config = case_config(case, seed=_derive_seed([sample_seed, 1]), **config_overrides)
    out = {"case": case, "n": n, "replicate": rep, "method": method}
    try:
        density, diag, seconds = run_method(method, samples, config, seed=config.seed)
        out["diagnostics"] = diag
        if timing:
            out["fit_seconds"] = seconds
        if density is not None:
            out.update(_metrics(density, samples, seed=config.seed))
    except (MessyError, ValueError, np.linalg.LinAlgError) as err:
        out["error"] = f"{type(err).__name__}: {err}"
    return out


def _case_tag(case: str) -> int:
    return abs(hash_stable(case)) % (2 ** 31)


def hash_stable(text: str) -> int:
    out = 0
    for ch in text:
        out = (out * 131 + ord(ch)) % (2 ** 61 - 1)
    return out


def _derive_seed(parts) -> int:
    ss = np.random.SeedSequence(parts)
    return int(ss.generate_state(1)[0])


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MESSY_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(case: str, n_list, methods, replicates: int = DEFAULT_REPLICATES,
                  seed: int = 0, timing: bool = True, **config_overrides) -> dict:
    """Fit each method on each (n, replicate) pair with derived seeds.

    Per-run failures are recorded, not fatal.  Timing is wall time around
    the fit only; runs are sequential whenever timing is on so the
    single-core numbers stay meaningful (MESSY_THREADS caps the pool
    otherwise).
    """
    methods = list(methods)
    for m in methods:
        if m not in METHOD_NAMES and m != "mxed":
            raise ValueError(f"unknown method {m!r}")
    tasks = [
        (case, int(n), rep, method, seed, config_overrides, timing)
        for n in n_list
        for rep in range(replicates)
        for method in methods
    ]
    workers = 1 if timing else max_workers()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_single, tasks))
    else:
        runs = [_run_single(t) for t in tasks]
    report = {
        "case": case,
        "seed": seed,
        "replicates": replicates,
        "n_list": [int(n) for n in n_list],
        "methods": methods,
        "runs": runs,
        "summary": _summarize(runs, n_list, methods, timing),
    }
    return report


def _summarize(runs, n_list, methods, timing):
    summary = []
    for n in n_list:
        for method in methods:
            rows = [r for r in runs if r["n"] == int(n) and r["method"] == method]
            ok = [r for r in rows if "error" not in r]
            entry = {
                "n": int(n),
                "method": method,
                "failures": len(rows) - len(ok),
                "runs": len(rows),
            }
            for key in ("kl",):
                vals = [r[key] for r in ok if key in r and r[key] is not None]
                entry.update(_mean_se(key, vals))
            if timing:
                vals = [r["fit_seconds"] for r in ok if "fit_seconds" in r]
                entry.update(_mean_se("fit_seconds", vals))
            low = [r["moment_rel_err_low"] for r in ok if "moment_rel_err_low" in r]
            if low:
                arr = np.array(low)
                entry["moment_rel_err_low_mean"] = [float(v) for v in arr.mean(axis=0)]
            high = [r["moment_rel_err_high"] for r in ok if "moment_rel_err_high" in r]
            if high:
                arr = np.array(high)
                entry["moment_rel_err_high_mean"] = [float(v) for v in arr.mean(axis=0)]
            summary.append(entry)
    return summary


def _mean_se(key, vals):
    if not vals:
        return {}
    arr = np.asarray(vals, dtype=float)
    out = {f"{key}_mean": float(arr.mean())}
    if arr.size > 1:
        out[f"{key}_se"] = float(arr.std(ddof=1) / math.sqrt(arr.size))
    return out


def scaling_study(d_list, n_list, seed: int = 0, replicates: int = 5,
                  order: int = 2) -> dict:
    """Wall time of the multiplier solve stage across dimensions and
    sample counts (single thread, mean over replicates)."""
    rows = []
    for d in d_list:
        case = f"gaussnd:{d}"
        for n in n_list:
            times = []
            for rep in range(replicates + 1):
                samples = gen_samples(case, int(n), _derive_seed([seed, d, n, rep]))
                t0 = time.perf_counter()
                _solve_multipliers(samples, order)
                if rep == 0:
                    continue  # untimed warm-up per configuration
                times.append(time.perf_counter() - t0)
            rows.append({
                "d": int(d),
                "n": int(n),
                "seconds_mean": float(np.mean(times)),
                "seconds_min": float(np.min(times)),
            })
    return {"seed": seed, "order": order, "rows": rows}


# ---------------------------------------------------------------------------
# CSV / JSON I/O
# ---------------------------------------------------------------------------

def ingest_csv(path) -> SampleSet:
    """One sample per row, d numeric columns, optional header."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise CsvParseError(f"non-numeric cell in {text!r}", lineno) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise CsvParseError(
                    f"expected {width} columns, got {len(vals)}", lineno
                )
            rows.append(vals)
    if not rows:
        raise CsvParseError("no data rows", 1)
    return SampleSet(np.array(rows), source=str(path))


def export_samples_csv(samples: SampleSet, path):
    np.savetxt(path, samples.values, delimiter=",", fmt="%.17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return obj
    return obj


def export_report(report: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def density_to_dict(density: MessyDensity) -> dict:
    levels = []
    for lv in density.levels:
        terms = [
            {"coeff": float(c), "expr": ex.render(e, lv.dimension)}
            for e, c in lv.exponent_terms()
            if c != 0.0
        ]
        levels.append({
            "exponent": render_density_exponents(
                MessyDensity(levels=[lv], mode=density.mode)
            )[0],
            "terms": terms,
            "lambda": [float(v) for v in lv.lam],
            "logZ": float(lv.log_z),
            "support": [
                [None if not math.isfinite(lo) else float(lo),
                 None if not math.isfinite(hi) else float(hi)]
                for lo, hi in lv.support
            ],
            "mass": float(lv.mass),
            "dimension": lv.dimension,
            "hint": None if lv.hint is None else {
                "box": _jsonable(lv.hint.box),
                "mean": _jsonable(lv.hint.mean),
                "std": _jsonable(lv.hint.std),
                "cov": _jsonable(lv.hint.cov),
            },
        })
    kl = density.kl_score
    return {
        "mode": density.mode,
        "levels": levels,
        "kl_score": None if (kl is None or math.isnan(kl)) else float(kl),
    }


def export_density(density: MessyDensity, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(density_to_dict(density)), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_density(path) -> MessyDensity:
    """Rebuild a sampleable density from an exported JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    levels = []
    for entry in data["levels"]:
        d = int(entry.get("dimension", 1))
        exprs = [ex.parse(t["expr"]) for t in entry["terms"]]
        coeffs = [t["coeff"] for t in entry["terms"]]
        if not exprs:
            exprs = [ex.monomial([0] * d)]
            coeffs = [0.0]
        basis = bs.build(exprs, d)
        support = np.array([
            [-math.inf if lo is None else lo, math.inf if hi is None else hi]
            for lo, hi in entry["support"]
        ])
        hint = None
        if entry.get("hint"):
            h = entry["hint"]
            hint = DataHint(
                box=np.array(h["box"], dtype=float),
                mean=np.array(h["mean"], dtype=float),
                std=np.array(h["std"], dtype=float),
                cov=np.array(h["cov"], dtype=float),
            )
        levels.append(LevelDensity(
            basis=basis, lam=np.array(coeffs, dtype=float),
            log_z=float(entry["logZ"]), support=support,
            mass=float(entry["mass"]), hint=hint,
        ))
    kl = data.get("kl_score")
    return MessyDensity(levels=levels, mode=data.get("mode", "p"),
                        kl_score=math.nan if kl is None else float(kl))


def sanity_check_case(samples: SampleSet) -> dict:
    """Realizability and standard-moment diagnostics for 1-d inputs."""
    out = {}
    if samples.dimension == 1:
        out["realizability_margin"] = realizability_margin(samples)
    return out
