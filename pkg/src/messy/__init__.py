"""Symbolic maximum-entropy density estimation from samples."""

from . import baseline, basis, bench, density, expr, lagrange, multilevel, mxed, search
from .basis import BasisSet, FeatureTables, build, features, orthonormalize
from .baseline import KdeDensity, kde_fit, kde_pdf
from .bench import gen_samples, ingest_csv, run_benchmark, scaling_study
from .density import (
    LevelDensity,
    MessyDensity,
    draw,
    kl_criterion,
    normalize,
    pdf,
    sample_moments,
)
from .expr import (
    Binary,
    Const,
    Expr,
    Unary,
    Var,
    differentiate,
    evaluate,
    growth_order,
    random_expr,
    render,
)
from .lagrange import LagrangeSolve, assemble_hessian, laplacian_moment, relaxation_rate, solve_lambda
from .multilevel import HistogramDensity, LevelTrace, fit_multilevel, histogram, mask
from .mxed import NewtonState, med_newton_oracle, mxed_correct
from .samples import SampleSet
from .search import Candidate, SearchConfig, messy_fit, sample_candidate, select_best

__version__ = "0.1.0"
