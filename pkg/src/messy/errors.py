"""Exception and warning types shared across the package."""


class MessyError(Exception):
    """Base class for all package-specific failures."""


class EvaluationError(MessyError):
    """An expression produced a non-finite value (overflow or NaN)."""

    def __init__(self, message, bad_index=None):
        super().__init__(message)
        self.bad_index = bad_index


class SearchExhaustedError(MessyError):
    """A bounded retry budget was spent without an admissible draw."""


class LinearDependenceError(MessyError):
    """Orthonormalization hit a numerically dependent basis function."""

    def __init__(self, index, expr_text):
        super().__init__(
            f"basis function {index} ({expr_text!r}) is linearly dependent "
            f"on its predecessors under the sample measure"
        )
        self.index = index
        self.expr_text = expr_text


class SingularHessianError(MessyError):
    """The multiplier system could not be solved to tolerance."""

    def __init__(self, cond):
        super().__init__(f"hessian is singular within round-off (cond ~ {cond:.3e})")
        self.cond = cond


class NonIntegrableError(MessyError):
    """exp(exponent) diverges over the requested support."""


class DegenerateDataError(MessyError):
    """Samples collapse to a single value along some dimension."""


class MaskConsistencyError(MessyError):
    """The histogram reference assigned zero density to an in-range sample."""


class MultilevelFailureError(MessyError):
    """No admissible level fit could be produced within the retry budget."""


class NewtonNonConvergenceError(MessyError):
    """Newton iteration stopped before reaching the gradient tolerance."""

    def __init__(self, message, grad_norm=None, state=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.state = state


class WeightDegeneracyError(MessyError):
    """Importance weights collapsed onto too few prior samples."""

    def __init__(self, ess, n):
        super().__init__(f"effective sample size {ess:.1f} below 1% of n={n}")
        self.ess = ess
        self.n = n


class KdeFailureError(MessyError):
    """Every candidate bandwidth scored -inf held-out likelihood."""


class MessyFailureError(MessyError):
    """Every pipeline iteration failed; diagnostics attached."""

    def __init__(self, diagnostics):
        super().__init__(f"all {len(diagnostics)} iterations failed")
        self.diagnostics = diagnostics


class CsvParseError(MessyError):
    """Malformed CSV input; carries the 1-based offending line number."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SamplerHealthWarning(UserWarning):
    """Metropolis acceptance rate left the healthy range."""


class QuadratureWarning(UserWarning):
    """Adaptive quadrature stopped refining before reaching tolerance."""
