"""
From trained network to parsimonious expression.

Each candidate threshold prunes small top-level terms and snaps constants to nearby
small-denominator rationals; candidates are scored with the Akaike Information Criterion
and the minimizer's linearly entering coefficients are refit by least squares.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .expr import (
    Const,
    EvaluationError,
    Expr,
    ExprSystem,
    Monomial,
    Sum,
    Var,
    build_term,
    canonicalize,
    count_constants,
    evaluate,
    format_expr,
    map_constants,
    nearest_rational,
    split_term,
    terms_of,
)
from .maps import Dataset
from .models import CandidateRecord, SimplificationReport

# Configure structured logging
logger = logging.getLogger(__name__)

THRESHOLDS: Tuple[float, ...] = tuple(float(t) for t in np.logspace(-2, 0, 11))
MAX_DENOMINATOR = 16
CONDITION_LIMIT = 1e10


class SelectionError(RuntimeError):
    """Raised when every simplification candidate is disqualified."""


class AICScore(NamedTuple):
    aic: float
    rss: float
    k: int


@dataclass(frozen=True)
class Candidate:
    threshold: float
    expr: ExprSystem
    aic: float
    rss: float
    k: int
    n_constants: int


@dataclass(frozen=True)
class SimplificationResult:
    candidates: Tuple[Candidate, ...]
    chosen: int

    @property
    def thresholds(self) -> Tuple[float, ...]:
        return tuple(c.threshold for c in self.candidates)

    @property
    def best(self) -> Candidate:
        return self.candidates[self.chosen]

    @property
    def expr(self) -> ExprSystem:
        return self.best.expr


@dataclass(frozen=True)
class RefinedModel:
    expr: ExprSystem
    coefficients: Tuple[np.ndarray, ...]
    rss_before: float
    rss_after: float
    condition_flag: bool
    flagged_dims: Tuple[int, ...] = ()


# ---- Snapping ----


def _snap_constant(c: float, t: float) -> float:
    r = nearest_rational(c, MAX_DENOMINATOR)
    return r if abs(c - r) <= t * max(1.0, abs(c)) else c


def snap_expr(e: Expr, t: float) -> Expr:
    kept = [term for term in terms_of(canonicalize(e)) if abs(split_term(term)[0]) > t]
    if not kept:
        return Const(0.0)
    snapped = [map_constants(term, lambda c: _snap_constant(c, t)) for term in kept]
    return canonicalize(Sum(tuple(snapped)))


def snap(e: ExprSystem, t: float) -> ExprSystem:
    """
    Prune top-level terms with |coefficient| <= t, then replace each remaining constant c by
    its nearest p/q (q <= 16) when |c - p/q| <= t * max(1, |c|).
    """
    if t <= 0:
        raise ValueError(f"threshold must be positive, got {t}")
    return ExprSystem(tuple(snap_expr(c, t) for c in e.components))


# ---- AIC and selection ----


def residual_sum_squares(expr: ExprSystem, inputs: np.ndarray, targets: np.ndarray) -> float:
    pred = expr.evaluate(inputs)
    return float(np.sum((pred - targets) ** 2))


def aic(expr: ExprSystem, ds: Dataset) -> AICScore:
    """
    AIC = 2k + M ln(RSS / M) with k = count_constants + 1.

    RSS == 0 maps to -inf; an expression that fails to evaluate scores +inf.
    """
    if ds.M < 2:
        raise ValueError("AIC needs at least two samples")
    k = count_constants(expr) + 1
    try:
        rss = residual_sum_squares(expr, ds.inputs, ds.targets)
    except EvaluationError as e:
        logger.warning(f"Candidate disqualified: {e}")
        return AICScore(math.inf, math.inf, k)
    if not math.isfinite(rss):
        return AICScore(math.inf, math.inf, k)
    if rss == 0.0:
        return AICScore(-math.inf, 0.0, k)
    return AICScore(2.0 * k + ds.M * math.log(rss / ds.M), rss, k)


def choose(scores: Sequence[float], thresholds: Sequence[float]) -> int:
    """Index of the smallest score; ties go to the larger threshold."""
    return min(range(len(scores)), key=lambda i: (scores[i], -thresholds[i]))


def select(
    e: ExprSystem, ds: Dataset, thresholds: Sequence[float] = THRESHOLDS
) -> SimplificationResult:
    """Snap at every threshold, score each candidate on the full dataset, keep the AIC minimizer."""
    candidates = []
    for t in thresholds:
        snapped = snap(e, t)
        score = aic(snapped, ds)
        candidates.append(
            Candidate(t, snapped, score.aic, score.rss, score.k, count_constants(snapped))
        )
    scores = [c.aic for c in candidates]
    if all(s == math.inf for s in scores):
        raise SelectionError("Every simplification candidate failed to evaluate")
    chosen = choose(scores, list(thresholds))
    logger.info(
        f"Chose threshold {candidates[chosen].threshold:.4g} "
        f"(AIC {candidates[chosen].aic:.6g}, k={candidates[chosen].k})"
    )
    return SimplificationResult(tuple(candidates), chosen)


# ---- OLS refinement ----


def decompose_terms(e: Expr) -> List[Tuple[float, Monomial]]:
    """(coefficient, coefficient-free basis factors) for each top-level term."""
    return [split_term(term) for term in terms_of(canonicalize(e))]


def _basis_columns(basis: Sequence[Monomial], X: np.ndarray) -> np.ndarray:
    cols = [
        np.ones(X.shape[0]) if not factors else evaluate(build_term(1.0, factors), X)
        for factors in basis
    ]
    return np.column_stack(cols)


def _least_squares_qr(G: np.ndarray, y: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(G)
    return np.linalg.solve(R, Q.T @ y)


def _has_frozen_constants(factors: Monomial) -> bool:
    return any(not isinstance(f, Var) for f in factors)


def _refine_component(
    e: Expr, X: np.ndarray, y: np.ndarray, dim: int
) -> Tuple[Expr, np.ndarray, bool]:
    parts = decompose_terms(e)
    if not parts:
        return e, np.zeros(0), False
    coefs = np.array([c for c, _ in parts])
    basis = [factors for _, factors in parts]
    if len(parts) == 1 and _has_frozen_constants(basis[0]):
        # Lone signomial or operator term: refit its outer coefficient plus an additive constant
        basis.append(())
        coefs = np.append(coefs, 0.0)

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            G = _basis_columns(basis, X)
    except EvaluationError as exc:
        logger.warning(f"Refinement skipped for x{dim}: {exc}")
        return e, coefs, True
    if G.shape[0] < G.shape[1]:
        logger.warning(f"Refinement skipped for x{dim}: {G.shape[0]} samples, {G.shape[1]} terms")
        return e, coefs, True
    cond = float(np.linalg.cond(G))
    if not math.isfinite(cond) or cond > CONDITION_LIMIT:
        logger.warning(f"Refinement skipped for x{dim}: design condition {cond:.3g}")
        return e, coefs, True

    new = _least_squares_qr(G, y)
    if np.sum((G @ new - y) ** 2) > np.sum((G @ coefs - y) ** 2):
        return e, coefs, False
    refined = canonicalize(Sum(tuple(build_term(float(c), f) for c, f in zip(new, basis))))
    return refined, new, False


def ols_refine(sr: Union[SimplificationResult, ExprSystem], ds: Dataset) -> RefinedModel:
    """
    Refit the linearly entering coefficients of the chosen expression on all M samples.

    Exponents and operator-internal constants stay frozen. A dimension whose design matrix has
    condition number above 1e10 keeps its incumbent coefficients and raises condition_flag.
    """
    expr = sr.expr if isinstance(sr, SimplificationResult) else sr
    X, Y = ds.inputs, ds.targets
    rss_before = residual_sum_squares(expr, X, Y)

    components: List[Expr] = []
    coefficients: List[np.ndarray] = []
    flagged: List[int] = []
    for j, comp in enumerate(expr.components):
        refined, coefs, flag = _refine_component(comp, X, Y[:, j], j)
        components.append(refined)
        coefficients.append(coefs)
        if flag:
            flagged.append(j)

    out = ExprSystem(tuple(components))
    try:
        rss_after = residual_sum_squares(out, X, Y)
    except EvaluationError:
        out, rss_after = expr, rss_before
    if rss_after > rss_before:
        out, rss_after = expr, rss_before
    logger.info(f"OLS refinement: RSS {rss_before:.6g} -> {rss_after:.6g}")
    return RefinedModel(
        expr=out,
        coefficients=tuple(coefficients),
        rss_before=rss_before,
        rss_after=rss_after,
        condition_flag=bool(flagged),
        flagged_dims=tuple(flagged),
    )


def simplification_report(
    sr: SimplificationResult, refined: Optional[RefinedModel] = None
) -> SimplificationReport:
    final = refined.expr if refined is not None else sr.expr
    return SimplificationReport(
        candidates=[
            CandidateRecord(
                threshold=c.threshold,
                expression_text=c.expr.format(exact=True),
                k=c.k,
                rss=c.rss,
                aic=c.aic,
            )
            for c in sr.candidates
        ],
        chosen_threshold=sr.best.threshold,
        refined_expression_text=final.format(exact=True),
        rss_before=refined.rss_before if refined is not None else sr.best.rss,
        rss_after=refined.rss_after if refined is not None else sr.best.rss,
        condition_flag=refined.condition_flag if refined is not None else False,
    )


def expression_text(e: ExprSystem, exact: bool = False) -> str:
    return "; ".join(format_expr(c, exact=exact) for c in e.components)
