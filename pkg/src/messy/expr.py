"""Symbolic expression trees used as density-exponent basis functions.

Trees are immutable and hashable, built from variables, finite constants,
the unary operators sin/cos/neg and the binary operators add/sub/mul.
Structural equality (``==``) is the notion of "same basis function" used
throughout the package.  Construction helpers fold constants and apply
0/1 identities; nothing beyond that is simplified.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, SearchExhaustedError

UNARY_OPS = ("sin", "cos", "neg")
BINARY_OPS = ("add", "sub", "mul")

# Frequency multipliers placed inside trig arguments by the random generator.
FREQ_LATTICE = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)


class Expr:
    """Base node type; concrete nodes are Var, Const, Unary, Binary."""

    __slots__ = ()

    def __call__(self, x):
        return evaluate(self, x)

    def __str__(self):
        return render(self)


@dataclass(frozen=True, repr=False)
class Var(Expr):
    index: int

    def __repr__(self):
        return f"Var({self.index})"


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"constant must be finite, got {self.value!r}")
        object.__setattr__(self, "value", float(self.value))

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, repr=False)
class Unary(Expr):
    op: str
    arg: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary op {self.op!r}")

    def __repr__(self):
        return f"{self.op}({self.arg!r})"


@dataclass(frozen=True, repr=False)
class Binary(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {self.op!r}")

    def __repr__(self):
        return f"{self.op}({self.lhs!r}, {self.rhs!r})"


# ---------------------------------------------------------------------------
# Construction helpers (constant folding and 0/1 identities only).
# ---------------------------------------------------------------------------

ZERO = Const(0.0)
ONE = Const(1.0)


def var(index: int) -> Expr:
    return Var(int(index))


def const(value: float) -> Expr:
    return Const(value)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if isinstance(a, Const) and a.value == 0.0:
        return b
    if isinstance(b, Const) and b.value == 0.0:
        return a
    return Binary("add", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if isinstance(b, Const) and b.value == 0.0:
        return a
    if isinstance(a, Const) and a.value == 0.0:
        return neg(b)
    return Binary("sub", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if isinstance(a, Const):
        if a.value == 0.0:
            return ZERO
        if a.value == 1.0:
            return b
    if isinstance(b, Const):
        if b.value == 0.0:
            return ZERO
        if b.value == 1.0:
            return a
    return Binary("mul", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def sin(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(math.sin(a.value))
    return Unary("sin", a)


def cos(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(math.cos(a.value))
    return Unary("cos", a)


_UNARY_BUILD = {"sin": sin, "cos": cos, "neg": neg}
_BINARY_BUILD = {"add": add, "sub": sub, "mul": mul}


def monomial(powers) -> Expr:
    """Product of x_j**powers[j], built by repeated multiplication."""
    out: Expr | None = None
    for j, p in enumerate(powers):
        for _ in range(int(p)):
            out = Var(j) if out is None else mul(out, Var(j))
    return ONE if out is None else out


def poly_basis(dimension: int, order: int) -> list[Expr]:
    """All monomials of total degree 1..order, graded-lexicographic.

    For dimension 1 this is [x, x^2, ..., x^order]; in higher dimensions
    degree-2 yields [x1, ..., xd, x1^2, x1*x2, ..., xd^2].
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    out = []
    for total in range(1, order + 1):
        for powers in _compositions(total, dimension):
            out.append(monomial(powers))
    return out


def _compositions(total, length):
    if length == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, length - 1):
            yield (first,) + rest


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def max_var_index(expr: Expr) -> int:
    """Largest variable index used, or -1 for constant expressions."""
    if isinstance(expr, Var):
        return expr.index
    if isinstance(expr, Const):
        return -1
    if isinstance(expr, Unary):
        return max_var_index(expr.arg)
    return max(max_var_index(expr.lhs), max_var_index(expr.rhs))


def depends_on_variable(expr: Expr) -> bool:
    return max_var_index(expr) >= 0


def evaluate(expr: Expr, x):
    """Evaluate at one point (shape (d,)) or a batch (shape (n, d)).

    Returns a float for a single point and an (n,) array for a batch.
    Raises EvaluationError when any output is non-finite; with the closed
    operator set an overflow anywhere in the tree always propagates to the
    output, so checking the result is sufficient.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2:
        raise ValueError("x must have shape (d,) or (n, d)")
    need = max_var_index(expr) + 1
    if pts.shape[1] < need:
        raise ValueError(f"expression uses {need} variables, x has {pts.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _eval(expr, pts)
    out = np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],))
    bad = ~np.isfinite(out)
    if bad.any():
        idx = int(np.argmax(bad))
        raise EvaluationError(
            f"non-finite value for {render(expr)!r} at sample {idx}", bad_index=idx
        )
    if single:
        return float(out[0])
    return np.array(out)


def _eval(expr, pts):
    if isinstance(expr, Var):
        return pts[:, expr.index]
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Unary):
        a = _eval(expr.arg, pts)
        if expr.op == "sin":
            return np.sin(a)
        if expr.op == "cos":
            return np.cos(a)
        return np.negative(a)
    a = _eval(expr.lhs, pts)
    b = _eval(expr.rhs, pts)
    if expr.op == "add":
        return np.add(a, b)
    if expr.op == "sub":
        return np.subtract(a, b)
    return np.multiply(a, b)


# ---------------------------------------------------------------------------
# Differentiation (exact, structural)
# ---------------------------------------------------------------------------

def differentiate(expr: Expr, index: int) -> Expr:
    """Exact partial derivative with respect to variable ``index``."""
    if isinstance(expr, Var):
        return ONE if expr.index == index else ZERO
    if isinstance(expr, Const):
        return ZERO
    if isinstance(expr, Unary):
        inner = differentiate(expr.arg, index)
        if expr.op == "sin":
            return mul(cos(expr.arg), inner)
        if expr.op == "cos":
            return mul(neg(sin(expr.arg)), inner)
        return neg(inner)
    da = differentiate(expr.lhs, index)
    db = differentiate(expr.rhs, index)
    if expr.op == "add":
        return add(da, db)
    if expr.op == "sub":
        return sub(da, db)
    return add(mul(da, expr.rhs), mul(expr.lhs, db))


def laplacian(expr: Expr, dimension: int) -> Expr:
    """Sum of second partials over the first ``dimension`` variables."""
    out: Expr = ZERO
    for j in range(dimension):
        out = add(out, differentiate(differentiate(expr, j), j))
    return out


# ---------------------------------------------------------------------------
# Growth order
# ---------------------------------------------------------------------------

def growth_order(expr: Expr) -> int:
    """Polynomial growth exponent: bounded trig counts 0, variables 1,
    products add, sums take the max."""
    if isinstance(expr, Var):
        return 1
    if isinstance(expr, Const):
        return 0
    if isinstance(expr, Unary):
        if expr.op == "neg":
            return growth_order(expr.arg)
        return 0
    if expr.op == "mul":
        return growth_order(expr.lhs) + growth_order(expr.rhs)
    return max(growth_order(expr.lhs), growth_order(expr.rhs))


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------

def random_expr(
    rng,
    dimension: int,
    max_order: int,
    ops=BINARY_OPS,
    funcs=("sin", "cos"),
    max_depth: int = 4,
    retries: int = 1000,
) -> Expr:
    """Draw a random tree with even growth order in (0-excluded constants,
    <= max_order), depending on at least one variable.

    Depth-bounded recursive sampling with rejection; deterministic given
    the rng state.  Raises SearchExhaustedError after ``retries`` draws.
    """
    if max_order < 2 or max_order % 2 != 0:
        raise ValueError("max_order must be even and >= 2")
    ops = tuple(ops)
    funcs = tuple(funcs)
    if not ops and not funcs:
        raise ValueError("need at least one operator or function")
    for op in ops:
        if op not in BINARY_OPS:
            raise ValueError(f"unknown operator {op!r}")
    for fn in funcs:
        if fn not in ("sin", "cos"):
            raise ValueError(f"unknown function {fn!r}")
    for _ in range(retries):
        tree = _random_tree(rng, dimension, ops, funcs, max_depth)
        order = growth_order(tree)
        if order % 2 == 0 and order <= max_order and depends_on_variable(tree):
            return tree
    raise SearchExhaustedError(
        f"no admissible expression within {retries} draws "
        f"(dimension={dimension}, max_order={max_order})"
    )


def _random_tree(rng, dimension, ops, funcs, depth_left):
    if depth_left <= 0:
        return Var(int(rng.integers(dimension)))
    weights = [0.3, 0.3 if funcs else 0.0, 0.4 if ops else 0.0]
    total = sum(weights)
    u = rng.random() * total
    if u < weights[0]:
        return Var(int(rng.integers(dimension)))
    if u < weights[0] + weights[1]:
        fn = funcs[int(rng.integers(len(funcs)))]
        freq = FREQ_LATTICE[int(rng.integers(len(FREQ_LATTICE)))]
        child = _random_tree(rng, dimension, ops, funcs, depth_left - 1)
        return _UNARY_BUILD[fn](mul(Const(freq), child))
    op = ops[int(rng.integers(len(ops)))]
    lhs = _random_tree(rng, dimension, ops, funcs, depth_left - 1)
    rhs = _random_tree(rng, dimension, ops, funcs, depth_left - 1)
    return _BINARY_BUILD[op](lhs, rhs)


# ---------------------------------------------------------------------------
# Rendering and parsing
# ---------------------------------------------------------------------------

# Precedence contexts: 0 = sum, 1 = product head (a leading minus is
# unambiguous there), 2 = product tail / power base.


def render(expr: Expr, dimension: int | None = None) -> str:
    """Stable infix text with constants printed to three decimals.

    Variables print as ``x`` for one-dimensional expressions and
    ``x1, x2, ...`` otherwise (pass ``dimension`` to force the style).
    """
    if dimension is None:
        dimension = max_var_index(expr) + 1
    names = _var_names(max(dimension, max_var_index(expr) + 1))
    return _render(expr, names, 0)


def _var_names(dimension):
    if dimension <= 1:
        return ("x",)
    return tuple(f"x{j + 1}" for j in range(dimension))


def _fmt_const(value):
    text = f"{value:.3f}"
    if text == "-0.000":
        text = "0.000"
    return text


def _render(expr, names, prec):
    if isinstance(expr, Var):
        return names[expr.index]
    if isinstance(expr, Const):
        text = _fmt_const(expr.value)
        if prec >= 2 and text.startswith("-"):
            return f"({text})"
        return text
    if isinstance(expr, Unary):
        if expr.op == "neg":
            text = f"-{_render(expr.arg, names, 2)}"
            return f"({text})" if prec >= 2 else text
        return f"{expr.op}({_render(expr.arg, names, 0)})"
    if expr.op in ("add", "sub"):
        left = _render(expr.lhs, names, 0)
        right = _render(expr.rhs, names, 1 if expr.op == "sub" else 0)
        if expr.op == "add":
            text = f"{left} - {right[1:]}" if right.startswith("-") else f"{left} + {right}"
        else:
            text = f"{left} + {right[1:]}" if right.startswith("-") else f"{left} - {right}"
        return f"({text})" if prec >= 1 else text
    factors = _mul_factors(expr)
    parts = []
    for pos, (factor, count) in enumerate(factors):
        piece = _render(factor, names, 2 if count > 1 or pos > 0 else 1)
        parts.append(f"{piece}^{count}" if count > 1 else piece)
    text = "*".join(parts)
    return f"({text})" if prec >= 2 else text


def _mul_factors(expr):
    """Flatten a mul chain and group structurally equal factors in order."""
    flat = []

    def walk(node):
        if isinstance(node, Binary) and node.op == "mul":
            walk(node.lhs)
            walk(node.rhs)
        else:
            flat.append(node)

    walk(expr)
    grouped: list[list] = []
    for node in flat:
        for entry in grouped:
            if entry[0] == node:
                entry[1] += 1
                break
        else:
            grouped.append([node, 1])
    return [(node, count) for node, count in grouped]


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?|\.\d+)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<sym>[-+*^()]))"
)


def parse(text: str) -> Expr:
    """Parse the renderer's own grammar back into a tree.

    Only the output of :func:`render` is supported (sums, products with
    ^ powers, sin/cos calls, x / x<k> variables, decimal constants).
    """
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ValueError(f"cannot tokenize {text[pos:]!r}")
        tokens.append(m)
        pos = m.end()
    stream = _TokenStream(tokens)
    tree = _parse_sum(stream)
    if stream.peek() is not None:
        raise ValueError(f"trailing input near {stream.peek().group(0)!r}")
    return tree


class _TokenStream:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise ValueError("unexpected end of input")
        self.pos += 1
        return tok


def _parse_sum(ts):
    node = _parse_product(ts)
    while True:
        tok = ts.peek()
        if tok is None or tok.group("sym") not in ("+", "-"):
            return node
        ts.next()
        rhs = _parse_product(ts)
        node = Binary("add", node, rhs) if tok.group("sym") == "+" else Binary("sub", node, rhs)


def _parse_product(ts):
    node = _parse_signed(ts)
    while True:
        tok = ts.peek()
        if tok is None or tok.group("sym") != "*":
            return node
        ts.next()
        node = Binary("mul", node, _parse_signed(ts))


def _parse_signed(ts):
    tok = ts.peek()
    if tok is not None and tok.group("sym") == "-":
        ts.next()
        inner = _parse_signed(ts)
        if isinstance(inner, Const):
            return Const(-inner.value)
        return Unary("neg", inner)
    return _parse_power(ts)


def _parse_power(ts):
    node = _parse_atom(ts)
    while True:
        tok = ts.peek()
        if tok is None or tok.group("sym") != "^":
            return node
        ts.next()
        exp_tok = ts.next()
        if exp_tok.group("num") is None:
            raise ValueError("expected integer exponent after '^'")
        k = int(float(exp_tok.group("num")))
        if k < 1:
            raise ValueError("exponent must be >= 1")
        out = node
        for _ in range(k - 1):
            out = Binary("mul", out, node)
        node = out


def _parse_atom(ts):
    tok = ts.next()
    if tok.group("num") is not None:
        return Const(float(tok.group("num")))
    if tok.group("sym") == "(":
        inner = _parse_sum(ts)
        closing = ts.next()
        if closing.group("sym") != ")":
            raise ValueError("expected ')'")
        return inner
    name = tok.group("name")
    if name is None:
        raise ValueError(f"unexpected token {tok.group(0)!r}")
    if name in ("sin", "cos"):
        opening = ts.next()
        if opening.group("sym") != "(":
            raise ValueError(f"expected '(' after {name}")
        inner = _parse_sum(ts)
        closing = ts.next()
        if closing.group("sym") != ")":
            raise ValueError("expected ')'")
        return Unary(name, inner)
    if name == "x":
        return Var(0)
    m = re.fullmatch(r"x(\d+)", name)
    if m:
        return Var(int(m.group(1)) - 1)
    raise ValueError(f"unknown name {name!r}")
