"""
Scoring of identified expressions: RRMSE, the true-model noise floor, trajectory
shadowing and state-space grids for plots.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .expr import EvaluationError, ExprSystem
from .maps import Dataset, Trajectory, TrajectoryEscapedError, generate_trajectory, iterate
from .models import EvalReport

# Configure structured logging
logger = logging.getLogger(__name__)

SHADOW_GAP = 0.05


class ZeroDenominatorError(ValueError):
    """Raised when the targets have zero total energy."""


class ShadowResult(NamedTuple):
    shadow_steps: int
    escaped: bool


@dataclass(frozen=True, eq=False)
class Portrait:
    header: Tuple[str, ...]
    rows: np.ndarray


def _ratio(num: float, denom: float) -> float:
    if denom == 0.0:
        raise ZeroDenominatorError("RRMSE undefined: targets are identically zero")
    return math.sqrt(num / denom)


def rrmse(expr: ExprSystem, ds: Dataset, mask: Optional[np.ndarray] = None) -> float:
    """
    sqrt(sum ||expr(x_m) - y_m||^2 / sum ||y_m||^2) over the (noisy) dataset pairs.

    Args:
        expr: Identified expression
        ds: Dataset to score against
        mask: Optional boolean selection of samples (e.g. one validation fold)

    Returns:
        RRMSE, or +inf if the expression fails to evaluate
    """
    X, Y = (ds.inputs, ds.targets) if mask is None else (ds.inputs[mask], ds.targets[mask])
    denom = float(np.sum(Y**2))
    if denom == 0.0:
        raise ZeroDenominatorError("RRMSE undefined: targets are identically zero")
    try:
        pred = expr.evaluate(X)
    except EvaluationError as e:
        logger.warning(f"RRMSE set to +inf: {e}")
        return math.inf
    return _ratio(float(np.sum((pred - Y) ** 2)), denom)


def true_rrmse(spec, ds: Dataset) -> float:
    """RRMSE of the exact map applied to the noisy inputs against the noisy targets."""
    pred = spec.apply(np.asarray(ds.inputs))
    return _ratio(float(np.sum((pred - ds.targets) ** 2)), float(np.sum(ds.targets**2)))


def clean_rrmse(expr: ExprSystem, spec, ds: Dataset) -> float:
    """RRMSE of the identified model against the exact map, both on the clean inputs."""
    truth = spec.apply(np.asarray(ds.clean_inputs))
    try:
        pred = expr.evaluate(ds.clean_inputs)
    except EvaluationError as e:
        logger.warning(f"Clean RRMSE set to +inf: {e}")
        return math.inf
    return _ratio(float(np.sum((pred - truth) ** 2)), float(np.sum(truth**2)))


def _model_step(expr: ExprSystem):
    def step(state: np.ndarray) -> np.ndarray:
        try:
            return expr.evaluate(state)
        except EvaluationError:
            return np.full(state.shape, np.nan)

    return step


def model_trajectory(expr: ExprSystem, x0, steps: int) -> Tuple[np.ndarray, bool]:
    """Iterate the identified model; returns (trajectory up to escape, escaped)."""
    start = np.asarray(x0, dtype=float).reshape(-1)
    try:
        return iterate(_model_step(expr), start, steps), False
    except TrajectoryEscapedError as e:
        return e.trajectory, True


def shadow(
    expr: ExprSystem, spec, x0, steps: int, gap: float = SHADOW_GAP
) -> ShadowResult:
    """
    Largest s such that the identified and true trajectories from x0 stay within `gap`
    (infinity norm) for every step i <= s.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if gap <= 0:
        raise ValueError(f"gap must be positive, got {gap}")
    try:
        truth = generate_trajectory(spec, x0, steps)
    except TrajectoryEscapedError as e:
        truth = e.trajectory
    model, escaped = model_trajectory(expr, x0, steps)
    n = min(len(truth), len(model))
    diff = np.max(np.abs(model[:n] - truth[:n]), axis=1)
    outside = np.nonzero(diff > gap)[0]
    shadow_steps = int(outside[0]) - 1 if outside.size else n - 1
    if escaped:
        logger.warning(f"Identified trajectory escaped after {len(model)} states")
    return ShadowResult(max(shadow_steps, 0), escaped)


def _grid(domain: Sequence[Tuple[float, float]], grid: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, grid) for lo, hi in domain]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _evaluate_rows(expr: ExprSystem, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    try:
        return expr.evaluate(X), np.zeros(X.shape[0], dtype=bool)
    except EvaluationError:
        out = np.full((X.shape[0], expr.dim), np.nan)
        failed = np.zeros(X.shape[0], dtype=bool)
        for m, x in enumerate(X):
            try:
                out[m] = expr.evaluate(x)
            except EvaluationError:
                failed[m] = True
        return out, failed


def export_portrait(
    expr: ExprSystem, spec, domain: Sequence[Tuple[float, float]], grid: int
) -> Portrait:
    """
    Grid-evaluate the exact map and the identified model over a box.

    Rows are (x0[, x1], output, true_f, expr_f, eval_failed), one row per grid point per
    output dimension. Failed evaluations carry NaN in expr_f and eval_failed = 1.
    """
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    if len(domain) != spec.dim:
        raise ValueError(f"Domain has {len(domain)} axes, map has dimension {spec.dim}")
    X = _grid(domain, grid)
    truth = spec.apply(X)
    pred, failed = _evaluate_rows(expr, X)
    blocks = []
    for j in range(spec.dim):
        blocks.append(
            np.column_stack(
                (X, np.full(X.shape[0], j), truth[:, j], pred[:, j], failed.astype(float))
            )
        )
    header = tuple(f"x{i}" for i in range(spec.dim))
    header += ("output", "true_f", "expr_f", "eval_failed")
    return Portrait(header, np.vstack(blocks))


def default_start(ds: Dataset) -> np.ndarray:
    if isinstance(ds.sampling, Trajectory):
        return np.asarray(ds.sampling.x0, dtype=float)
    return np.asarray(ds.clean_inputs[0], dtype=float)


def evaluate_expression(
    expr: ExprSystem,
    ds: Dataset,
    spec=None,
    val_mae: Optional[float] = None,
    x0=None,
    steps: int = 30,
    gap: float = SHADOW_GAP,
) -> EvalReport:
    """Assemble an EvalReport; map-dependent fields stay empty without a map."""
    report = {"rrmse": rrmse(expr, ds), "val_mae": val_mae}
    if spec is not None:
        start = default_start(ds) if x0 is None else x0
        result = shadow(expr, spec, start, steps, gap)
        report.update(
            true_rrmse=true_rrmse(spec, ds),
            clean_rrmse=clean_rrmse(expr, spec, ds),
            shadow_steps=result.shadow_steps,
            escaped=result.escaped,
        )
    return EvalReport(**report)
