"""
Immutable symbolic expression trees for identified maps.

Expressions are built from constants, state variables `x0, x1, ...`, sums, products,
signomials `|base|^exponent` and the unary operators sin, abs, exp and sign. The
module provides evaluation over numpy arrays, a small recursive-descent parser,
canonicalization (flattening, constant folding, like-term merging, stable ordering),
constant counting for information criteria, and text formatting that parses back.
"""

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

# Configure structured logging
logger = logging.getLogger(__name__)

OPERATORS: Tuple[str, ...] = ("sin", "abs", "exp", "sign")


class ExprParseError(ValueError):
    """Raised when expression text does not match the grammar."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class EvaluationError(ArithmeticError):
    """Raised when an expression cannot be evaluated (0 to a negative power, overflow)."""

    def __init__(self, message: str, subexpression: "Expr"):
        super().__init__(f"{message}: {format_expr(subexpression)}")
        self.subexpression = subexpression


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise ValueError(f"Const value must be finite, got {self.value}")


@dataclass(frozen=True)
class Var:
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"Var index must be non-negative, got {self.index}")


@dataclass(frozen=True)
class Sum:
    terms: Tuple["Expr", ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


@dataclass(frozen=True)
class Prod:
    factors: Tuple["Expr", ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))


@dataclass(frozen=True)
class Signomial:
    """|base|^exponent."""

    base: "Expr"
    exponent: float

    def __post_init__(self):
        object.__setattr__(self, "exponent", float(self.exponent))
        if not math.isfinite(self.exponent):
            raise ValueError(f"Signomial exponent must be finite, got {self.exponent}")


@dataclass(frozen=True)
class Op:
    name: str
    arg: "Expr"

    def __post_init__(self):
        if self.name not in OPERATORS:
            raise ValueError(f"Unknown operator '{self.name}'")


Expr = Union[Const, Var, Sum, Prod, Signomial, Op]


@dataclass(frozen=True)
class ExprSystem:
    """One expression per output state dimension."""

    components: Tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("ExprSystem needs at least one component")

    @property
    def dim(self) -> int:
        return len(self.components)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return evaluate_system(self, x)

    def canonical(self) -> "ExprSystem":
        return ExprSystem(tuple(canonicalize(c) for c in self.components))

    def format(self, exact: bool = False) -> str:
        return "\n".join(format_expr(c, exact=exact) for c in self.components)


# ---- Evaluation ----

_OP_FUNCS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "abs": np.abs,
    "exp": np.exp,
    "sign": np.sign,
}


def _eval(e: Expr, cols: List[np.ndarray], n_points: int) -> np.ndarray:
    if isinstance(e, Const):
        return np.full(n_points, e.value)
    if isinstance(e, Var):
        if e.index >= len(cols):
            raise ValueError(f"Variable x{e.index} out of range for state dimension {len(cols)}")
        return cols[e.index]
    if isinstance(e, Sum):
        out = np.zeros(n_points)
        for t in e.terms:
            out = out + _eval(t, cols, n_points)
        return out
    if isinstance(e, Prod):
        out = np.ones(n_points)
        for f in e.factors:
            out = out * _eval(f, cols, n_points)
        return out
    if isinstance(e, Signomial):
        b = np.abs(_eval(e.base, cols, n_points))
        if e.exponent < 0 and np.any(b == 0.0):
            raise EvaluationError("0 raised to a negative power", e)
        return b**e.exponent
    if isinstance(e, Op):
        return _OP_FUNCS[e.name](_eval(e.arg, cols, n_points))
    raise TypeError(f"Not an expression node: {e!r}")


def evaluate(e: Expr, x) -> Union[float, np.ndarray]:
    """
    Evaluate an expression at one state vector or a batch of them.

    Args:
        e: Expression
        x: State vector of shape (n,) or batch of shape (M, n)

    Returns:
        A float for a single state, an array of shape (M,) for a batch

    Raises:
        EvaluationError: On 0 raised to a negative power or a non-finite result
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    X = arr.reshape(1, -1) if single else arr
    cols = [X[:, j] for j in range(X.shape[1])]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _eval(e, cols, X.shape[0])
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite value", e)
    return float(out[0]) if single else out


def evaluate_system(system: ExprSystem, x) -> np.ndarray:
    """Evaluate every component; returns shape (n,) for one state or (M, n) for a batch."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1:
        return np.array([evaluate(c, arr) for c in system.components])
    return np.column_stack([evaluate(c, arr) for c in system.components])


# ---- Canonicalization ----

Monomial = Tuple[Expr, ...]
Poly = Dict[Monomial, float]


@lru_cache(maxsize=65536)
def _sort_key(e: Expr) -> tuple:
    if isinstance(e, Var):
        return (0, e.index)
    if isinstance(e, Signomial):
        return (1, _sort_key(e.base), e.exponent)
    if isinstance(e, Op):
        return (2, OPERATORS.index(e.name), _sort_key(e.arg))
    if isinstance(e, Const):
        return (3, e.value)
    if isinstance(e, Sum):
        return (4, tuple(_sort_key(t) for t in e.terms))
    return (5, tuple(_sort_key(f) for f in e.factors))


def _term_key(m: Monomial) -> tuple:
    if not m:
        rank = 3
    elif any(isinstance(f, Op) for f in m):
        rank = 2
    elif any(isinstance(f, Signomial) for f in m):
        rank = 1
    else:
        rank = 0
    return (rank, tuple(_sort_key(f) for f in m))


def _finite_or_none(v: float) -> Optional[float]:
    return v if math.isfinite(v) else None


def _fold_op(name: str, v: float) -> Optional[float]:
    if name == "sin":
        return math.sin(v)
    if name == "abs":
        return abs(v)
    if name == "sign":
        return float(np.sign(v))
    try:
        return _finite_or_none(math.exp(v))
    except OverflowError:
        return None


def _const_poly(v: float) -> Poly:
    return {(): v} if v != 0.0 else {}


def _add_into(acc: Poly, p: Poly) -> None:
    for m, c in p.items():
        acc[m] = acc.get(m, 0.0) + c


def _normalize(factors: Iterable[Expr]) -> Monomial:
    var_counts: Counter = Counter()
    sig_exps: Dict[Expr, float] = {}
    others: List[Expr] = []
    for f in factors:
        if isinstance(f, Var):
            var_counts[f.index] += 1
        elif isinstance(f, Signomial):
            sig_exps[f.base] = sig_exps.get(f.base, 0.0) + f.exponent
        else:
            others.append(f)
    for idx, k in var_counts.items():
        if k >= 2:
            # x*x == |x|^2 for real x
            base = Var(idx)
            sig_exps[base] = sig_exps.get(base, 0.0) + float(k - k % 2)
        if k % 2:
            others.append(Var(idx))
    out = others + [Signomial(b, p) for b, p in sig_exps.items() if p != 0.0]
    return tuple(sorted(out, key=_sort_key))


def _mul(p: Poly, q: Poly) -> Poly:
    out: Poly = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            m = _normalize(m1 + m2)
            out[m] = out.get(m, 0.0) + c1 * c2
    return out


def _signomial_poly(b: Expr, p: float) -> Poly:
    if p == 0.0:
        return {(): 1.0}
    if isinstance(b, Const):
        if b.value == 0.0 and p < 0:
            return {(Signomial(b, p),): 1.0}
        try:
            v = _finite_or_none(abs(b.value) ** p)
        except OverflowError:
            v = None
        return _const_poly(v) if v is not None else {(Signomial(b, p),): 1.0}
    if isinstance(b, Signomial):
        return _signomial_poly(b.base, b.exponent * p)
    if isinstance(b, Prod):
        acc: Poly = {(): 1.0}
        for f in b.factors:
            acc = _mul(acc, _signomial_poly(f, p))
        return acc
    return {(Signomial(b, p),): 1.0}


def _poly(e: Expr) -> Poly:
    if isinstance(e, Const):
        return _const_poly(e.value)
    if isinstance(e, Var):
        return {(e,): 1.0}
    if isinstance(e, Sum):
        acc: Poly = {}
        for t in e.terms:
            _add_into(acc, _poly(t))
        return acc
    if isinstance(e, Prod):
        acc = {(): 1.0}
        for f in e.factors:
            acc = _mul(acc, _poly(f))
            if not acc:
                return {}
        return acc
    if isinstance(e, Signomial):
        return _signomial_poly(canonicalize(e.base), e.exponent)
    if isinstance(e, Op):
        arg = canonicalize(e.arg)
        if isinstance(arg, Const):
            v = _fold_op(e.name, arg.value)
            if v is not None:
                return _const_poly(v)
        return {(Op(e.name, arg),): 1.0}
    raise TypeError(f"Not an expression node: {e!r}")


def _term(m: Monomial, c: float) -> Expr:
    if not m:
        return Const(c)
    if c == 1.0:
        return m[0] if len(m) == 1 else Prod(m)
    return Prod((Const(c),) + m)


def _from_poly(p: Poly) -> Expr:
    items = sorted(((m, c) for m, c in p.items() if c != 0.0), key=lambda mc: _term_key(mc[0]))
    terms = [_term(m, c) for m, c in items]
    if not terms:
        return Const(0.0)
    if len(terms) == 1:
        return terms[0]
    return Sum(tuple(terms))


def canonicalize(e: Expr) -> Expr:
    """
    Return the canonical form of an expression.

    Products are distributed over sums, nested sums/products flattened, constant
    subtrees folded, like terms merged into one leading coefficient, `x*x` rewritten
    as `|x|^2`, signomials sharing a base merged, and terms sorted by a structural key.
    """
    return _from_poly(_poly(e))


def split_term(term: Expr) -> Tuple[float, Monomial]:
    """Split a canonical additive term into (coefficient, coefficient-free factors)."""
    if isinstance(term, Const):
        return term.value, ()
    if isinstance(term, Prod):
        if isinstance(term.factors[0], Const):
            return term.factors[0].value, term.factors[1:]
        return 1.0, term.factors
    return 1.0, (term,)


def terms_of(e: Expr) -> Tuple[Expr, ...]:
    """Top-level additive terms of a canonical expression."""
    if isinstance(e, Sum):
        return e.terms
    if isinstance(e, Const) and e.value == 0.0:
        return ()
    return (e,)


def build_term(coefficient: float, factors: Monomial) -> Expr:
    return _term(tuple(factors), coefficient) if coefficient != 0.0 else Const(0.0)


# ---- Constant counting ----


def count_constants(e: Union[Expr, ExprSystem]) -> int:
    """
    Count numeric-constant positions in a canonical expression.

    Const leaves and signomial exponents count; structural 0 and 1 do not, and a leading
    product coefficient of -1 is a sign rather than a constant.
    """
    if isinstance(e, ExprSystem):
        return sum(count_constants(c) for c in e.components)
    if isinstance(e, Const):
        return 0 if e.value in (0.0, 1.0) else 1
    if isinstance(e, Var):
        return 0
    if isinstance(e, Sum):
        return sum(count_constants(t) for t in e.terms)
    if isinstance(e, Prod):
        factors = e.factors
        n = 0
        if factors and isinstance(factors[0], Const) and factors[0].value == -1.0:
            factors = factors[1:]
        for f in factors:
            n += count_constants(f)
        return n
    if isinstance(e, Signomial):
        return count_constants(e.base) + (0 if e.exponent in (0.0, 1.0) else 1)
    if isinstance(e, Op):
        return count_constants(e.arg)
    raise TypeError(f"Not an expression node: {e!r}")


def map_constants(e: Expr, fn: Callable[[float], float]) -> Expr:
    """Rebuild an expression with every Const value and signomial exponent passed through `fn`."""
    if isinstance(e, Const):
        return Const(fn(e.value))
    if isinstance(e, Var):
        return e
    if isinstance(e, Sum):
        return Sum(tuple(map_constants(t, fn) for t in e.terms))
    if isinstance(e, Prod):
        return Prod(tuple(map_constants(f, fn) for f in e.factors))
    if isinstance(e, Signomial):
        return Signomial(map_constants(e.base, fn), fn(e.exponent))
    return Op(e.name, map_constants(e.arg, fn))


# ---- Formatting ----


def _num(v: float, exact: bool) -> str:
    if exact:
        s = repr(float(v))
        return s[:-2] if s.endswith(".0") else s
    return f"{v:.6g}"


def _is_negative(term: Expr) -> bool:
    if isinstance(term, Const):
        return term.value < 0
    if not isinstance(term, Prod):
        return False
    return isinstance(term.factors[0], Const) and term.factors[0].value < 0


def _negate(term: Expr) -> Expr:
    if isinstance(term, Const):
        return Const(-term.value)
    coef = -term.factors[0].value
    rest = term.factors[1:]
    if coef == 1.0:
        return rest[0] if len(rest) == 1 else Prod(rest)
    return Prod((Const(coef),) + rest)


def _fmt(e: Expr, exact: bool) -> str:
    if isinstance(e, Const):
        return _num(e.value, exact)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Sum):
        parts = [_fmt(e.terms[0], exact)]
        for t in e.terms[1:]:
            if _is_negative(t):
                parts.append(f"- {_fmt(_negate(t), exact)}")
            else:
                parts.append(f"+ {_fmt(t, exact)}")
        return " ".join(parts)
    if isinstance(e, Prod):
        factors = list(e.factors)
        prefix = ""
        if isinstance(factors[0], Const) and len(factors) > 1:
            c = factors.pop(0).value
            prefix = "-" if c == -1.0 else f"{_num(c, exact)}*"
        body = "*".join(
            f"({_fmt(f, exact)})" if isinstance(f, Sum) else _fmt(f, exact) for f in factors
        )
        return prefix + body
    if isinstance(e, Signomial):
        base = _fmt(e.base, exact)
        if e.exponent == 1.0:
            return f"|{base}|"
        return f"|{base}|^{_num(e.exponent, exact)}"
    return f"{e.name}({_fmt(e.arg, exact)})"


def format_expr(e: Expr, exact: bool = False) -> str:
    """
    Format an expression in the parse grammar.

    Args:
        e: Expression (canonicalized before printing)
        exact: Print constants with the shortest bit-exact representation instead of
            6 significant digits

    Returns:
        Deterministic expression text
    """
    return _fmt(canonicalize(e), exact)


# ---- Parsing ----

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<sym>[-+*/^()|]))"
)
_VAR_RE = re.compile(r"x(\d+)$")


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            bad = len(text) - len(text[pos:].lstrip())
            raise ExprParseError(f"Unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _take(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def _expect(self, text: str) -> None:
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ExprParseError(f"Expected {text!r} but found {found!r}", self.tok.pos)
        self.i += 1

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprParseError(f"Unexpected token {self.tok.text!r}", self.tok.pos)
        return e

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.tok.text in ("+", "-"):
            op = self._take().text
            t = self.term()
            terms.append(t if op == "+" else Prod((Const(-1.0), t)))
        return terms[0] if len(terms) == 1 else Sum(tuple(terms))

    def term(self) -> Expr:
        factors = [self.unary()]
        while self.tok.text in ("*", "/"):
            op = self._take()
            f = self.unary()
            if op.text == "*":
                factors.append(f)
            else:
                factors.extend(self._reciprocal(f, op.pos))
        return factors[0] if len(factors) == 1 else Prod(tuple(factors))

    def _reciprocal(self, f: Expr, pos: int) -> List[Expr]:
        folded = canonicalize(f)
        if isinstance(folded, Const):
            if folded.value == 0.0:
                raise ExprParseError("Division by zero constant", pos)
            return [Const(1.0 / folded.value)]
        if isinstance(folded, Signomial):
            return [Signomial(folded.base, -folded.exponent)]
        # a/b == a*sign(b)*|b|^-1
        return [Op("sign", folded), Signomial(folded, -1.0)]

    def unary(self) -> Expr:
        if self.tok.text == "-":
            self._take()
            return Prod((Const(-1.0), self.unary()))
        if self.tok.text == "+":
            self._take()
            return self.unary()
        return self.power()

    def _signed_number(self) -> float:
        sign = 1.0
        if self.tok.text in ("-", "+"):
            sign = -1.0 if self._take().text == "-" else 1.0
        if self.tok.kind != "num":
            raise ExprParseError("Expected a numeric exponent", self.tok.pos)
        return sign * float(self._take().text)

    def power(self) -> Expr:
        barred = self.tok.text == "|"
        base = self.primary()
        if self.tok.text != "^":
            return Signomial(base, 1.0) if barred else base
        self._take()
        p = self._signed_number()
        if barred:
            return Signomial(base, p)
        if p.is_integer() and 0 <= p <= 4:
            k = int(p)
            if k == 0:
                return Const(1.0)
            return base if k == 1 else Prod(tuple([base] * k))
        return Signomial(base, p)

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self._take()
            return Const(float(t.text))
        if t.kind == "name":
            self._take()
            m = _VAR_RE.match(t.text)
            if m:
                return Var(int(m.group(1)))
            if t.text not in OPERATORS:
                raise ExprParseError(f"Unknown operator name {t.text!r}", t.pos)
            self._expect("(")
            arg = self.expr()
            self._expect(")")
            return Op(t.text, arg)
        if t.text == "(":
            self._take()
            e = self.expr()
            self._expect(")")
            return e
        if t.text == "|":
            self._take()
            e = self.expr()
            self._expect("|")
            return e
        raise ExprParseError(f"Unexpected token {t.text or 'end of input'!r}", t.pos)


def parse(text: str) -> Expr:
    """
    Parse expression text into a canonical Expr.

    Raises:
        ExprParseError: On a syntax error or unknown operator, with the offending position
    """
    return canonicalize(_Parser(text).parse())


def parse_system(text: str) -> ExprSystem:
    """Parse one expression per non-empty, non-comment line."""
    lines = [ln.strip() for ln in text.splitlines()]
    exprs = [parse(ln) for ln in lines if ln and not ln.startswith("#")]
    if not exprs:
        raise ExprParseError("No expressions found", 0)
    return ExprSystem(tuple(exprs))


def nearest_rational(c: float, max_denominator: int = 16) -> float:
    """Closest p/q to c with 1 <= q <= max_denominator."""
    return float(Fraction(c).limit_denominator(max_denominator))
