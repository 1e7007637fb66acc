"""
Ground-truth iterated maps, trajectory/dataset generation and RMS-scaled noise.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Annotated, Callable, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .expr import Const, ExprSystem, Op, Prod, Signomial, Sum, Var, canonicalize, parse
from .utils import gaussian_stream, permutation

# Configure structured logging
logger = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


class DimensionMismatchError(ValueError):
    """Raised when a state vector does not match the map's dimension."""


class TrajectoryEscapedError(ArithmeticError):
    """Raised when an iterate leaves the divergence guard box."""

    def __init__(self, step: int, trajectory: np.ndarray):
        bound = f"{DIVERGENCE_BOUND:g}"
        super().__init__(f"Trajectory escaped [-{bound}, {bound}]^n at step {step}")
        self.step = step
        # Iterates up to, not including, the escaping one
        self.trajectory = trajectory


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False, extra="forbid")


class LogisticMap(_Frozen):
    """x -> r*x*(1 - x)."""

    kind: Literal["logistic"] = "logistic"
    r: float = 3.9

    @property
    def dim(self) -> int:
        return 1

    def apply(self, X: np.ndarray) -> np.ndarray:
        x = X[:, 0]
        return (self.r * x * (1.0 - x))[:, None]

    def as_system(self) -> ExprSystem:
        x = Var(0)
        rx = Prod((Const(self.r), x))
        rx2 = Prod((Const(-self.r), Signomial(x, 2.0)))
        return ExprSystem((canonicalize(Sum((rx, rx2))),))


class GaussianMap(_Frozen):
    """x -> exp(-alpha*x^2) + beta."""

    kind: Literal["gaussian"] = "gaussian"
    alpha: float = 12.0
    beta: float = -0.5

    @property
    def dim(self) -> int:
        return 1

    def apply(self, X: np.ndarray) -> np.ndarray:
        x = X[:, 0]
        return (np.exp(-self.alpha * x * x) + self.beta)[:, None]

    def as_system(self) -> ExprSystem:
        inner = Prod((Const(-self.alpha), Signomial(Var(0), 2.0)))
        return ExprSystem((canonicalize(Sum((Op("exp", inner), Const(self.beta)))),))


class TinkerbellMap(_Frozen):
    """(x, y) -> (x^2 - y^2 + a*x + b*y, 2*x*y + c*x + d*y)."""

    kind: Literal["tinkerbell"] = "tinkerbell"
    a: float = 0.9
    b: float = -0.6013
    c: float = 2.0
    d: float = 0.5

    @property
    def dim(self) -> int:
        return 2

    def apply(self, X: np.ndarray) -> np.ndarray:
        x, y = X[:, 0], X[:, 1]
        return np.column_stack(
            (x * x - y * y + self.a * x + self.b * y, 2.0 * x * y + self.c * x + self.d * y)
        )

    def as_system(self) -> ExprSystem:
        x, y = Var(0), Var(1)
        fx = Sum(
            (
                Signomial(x, 2.0),
                Prod((Const(-1.0), Signomial(y, 2.0))),
                Prod((Const(self.a), x)),
                Prod((Const(self.b), y)),
            )
        )
        fy = Sum((Prod((Const(2.0), x, y)), Prod((Const(self.c), x)), Prod((Const(self.d), y))))
        return ExprSystem((canonicalize(fx), canonicalize(fy)))


@lru_cache(maxsize=256)
def _parse_components(exprs: Tuple[str, ...]) -> ExprSystem:
    return ExprSystem(tuple(parse(e) for e in exprs))


class CustomMap(_Frozen):
    """A map given by one expression per state dimension."""

    kind: Literal["custom"] = "custom"
    exprs: Tuple[str, ...]

    @field_validator("exprs")
    @classmethod
    def validate_exprs(cls, v):
        if not v:
            raise ValueError("Custom map needs at least one expression")
        system = _parse_components(tuple(v))
        for comp in system.components:
            highest = _max_var(comp)
            if highest >= len(v):
                raise ValueError(f"x{highest} referenced in a {len(v)}-dimensional custom map")
        return v

    @property
    def dim(self) -> int:
        return len(self.exprs)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.as_system().evaluate(X)

    def as_system(self) -> ExprSystem:
        return _parse_components(tuple(self.exprs))


def _max_var(e) -> int:
    if isinstance(e, Var):
        return e.index
    children = getattr(e, "terms", None) or getattr(e, "factors", None)
    if children:
        return max(_max_var(c) for c in children)
    if isinstance(e, Signomial):
        return _max_var(e.base)
    if isinstance(e, Op):
        return _max_var(e.arg)
    return -1


MapSpec = Annotated[
    Union[LogisticMap, GaussianMap, TinkerbellMap, CustomMap], Field(discriminator="kind")
]


class NoiseConfig(_Frozen):
    sigma: float = Field(default=0.0, ge=0.0)
    seed: int = 0


class Trajectory(_Frozen):
    kind: Literal["trajectory"] = "trajectory"
    x0: Tuple[float, ...]
    steps: int = Field(ge=1)


class LinSpace(_Frozen):
    kind: Literal["linspace"] = "linspace"
    lo: float
    hi: float
    M: int = Field(ge=2)


class External(_Frozen):
    """Pairs read from a file rather than generated."""

    kind: Literal["external"] = "external"
    source: str


Sampling = Annotated[Union[Trajectory, LinSpace, External], Field(discriminator="kind")]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    M input/target state pairs with fold assignments and noise metadata.

    Clean (pre-noise) arrays are retained so clean-input scores can be computed.
    """

    inputs: np.ndarray
    targets: np.ndarray
    sampling: Union[Trajectory, LinSpace, External]
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fold_ids: Optional[np.ndarray] = None
    folds: int = 1
    clean_inputs: Optional[np.ndarray] = None
    clean_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        targets = np.asarray(self.targets, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if targets.ndim == 1:
            targets = targets[:, None]
        if inputs.shape != targets.shape or inputs.shape[0] < 1:
            raise ValueError(
                f"inputs {inputs.shape} and targets {targets.shape} must match and be nonempty"
            )
        fold_ids = (
            np.zeros(inputs.shape[0], dtype=np.int64)
            if self.fold_ids is None
            else np.asarray(self.fold_ids, dtype=np.int64)
        )
        if fold_ids.shape != (inputs.shape[0],):
            raise ValueError("fold_ids must have one entry per sample")
        clean_in = inputs if self.clean_inputs is None else np.asarray(self.clean_inputs, float)
        clean_out = targets if self.clean_targets is None else np.asarray(self.clean_targets, float)
        object.__setattr__(self, "inputs", _readonly(inputs))
        object.__setattr__(self, "targets", _readonly(targets))
        object.__setattr__(self, "fold_ids", _readonly(fold_ids))
        object.__setattr__(self, "clean_inputs", _readonly(clean_in.reshape(inputs.shape)))
        object.__setattr__(self, "clean_targets", _readonly(clean_out.reshape(targets.shape)))

    @property
    def M(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def fold_mask(self, fold: int) -> np.ndarray:
        return self.fold_ids == fold

    def rms(self) -> np.ndarray:
        """Per-dimension RMS of the clean inputs."""
        return np.sqrt(np.mean(self.clean_inputs**2, axis=0))


def _as_state(spec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape[0] != spec.dim:
        raise DimensionMismatchError(f"State has dimension {arr.shape[0]}, map expects {spec.dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"State must be finite, got {arr}")
    return arr


def step(spec, x) -> np.ndarray:
    """Apply the exact map once to a single state vector."""
    arr = _as_state(spec, x)
    return spec.apply(arr[None, :])[0]


def iterate(fn: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, steps: int) -> np.ndarray:
    """
    Iterate `fn` from `x0` under the divergence guard.

    Returns:
        Array of shape (steps + 1, n)

    Raises:
        TrajectoryEscapedError: When an iterate is non-finite or leaves the guard box
    """
    traj = np.empty((steps + 1, x0.shape[0]))
    traj[0] = x0
    for t in range(1, steps + 1):
        nxt = np.asarray(fn(traj[t - 1]), dtype=float)
        if not np.all(np.isfinite(nxt)) or np.any(np.abs(nxt) > DIVERGENCE_BOUND):
            raise TrajectoryEscapedError(t, traj[:t].copy())
        traj[t] = nxt
    return traj


def generate_trajectory(spec, x0, steps: int) -> np.ndarray:
    """
    Generate [x0, f(x0), f(f(x0)), ...].

    Args:
        spec: Map specification
        x0: Initial state
        steps: Number of map applications (>= 1)

    Returns:
        Array of shape (steps + 1, n)
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    start = _as_state(spec, x0)
    return iterate(lambda s: spec.apply(s[None, :])[0], start, steps)


def trajectory_dataset(spec, x0, M: int) -> Dataset:
    """Consecutive pairs (x_t, x_{t+1}), t = 0..M-1, from an (M+1)-point trajectory."""
    traj = generate_trajectory(spec, x0, M)
    logger.debug(f"Generated {spec.kind} trajectory with {M} pairs")
    return Dataset(
        inputs=traj[:-1],
        targets=traj[1:],
        sampling=Trajectory(x0=tuple(float(v) for v in traj[0]), steps=M),
    )


def sample_linspace(spec, lo: float, hi: float, M: int) -> Dataset:
    """M evenly spaced inputs over [lo, hi] (endpoints included) with exact targets."""
    if spec.dim != 1:
        raise ValueError(f"Linspace sampling supports one-dimensional maps, got dim={spec.dim}")
    if not lo < hi:
        raise ValueError(f"Need lo < hi, got [{lo}, {hi}]")
    if M < 2:
        raise ValueError(f"Need M >= 2, got {M}")
    inputs = np.linspace(lo, hi, M)[:, None]
    return Dataset(inputs=inputs, targets=spec.apply(inputs), sampling=LinSpace(lo=lo, hi=hi, M=M))


def add_noise(ds: Dataset, cfg: NoiseConfig) -> Dataset:
    """
    Perturb inputs and targets with Gaussian noise of std sigma * RMS_j per state dimension.

    Trajectory datasets perturb the underlying state stream once, so a noisy target is the
    next noisy input. Other samplings draw inputs and targets independently.
    """
    if ds.noise.sigma > 0:
        raise ValueError("Dataset is already noised")
    if cfg.sigma == 0:
        return ds
    scale = cfg.sigma * ds.rms()
    M, n = ds.M, ds.dim
    if isinstance(ds.sampling, Trajectory):
        states = np.vstack((ds.clean_inputs, ds.clean_targets[-1:]))
        noisy = states + scale * gaussian_stream(cfg.seed, (M + 1) * n).reshape(M + 1, n)
        inputs, targets = noisy[:-1], noisy[1:]
    else:
        z = gaussian_stream(cfg.seed, 2 * M * n).reshape(2, M, n)
        inputs = ds.clean_inputs + scale * z[0]
        targets = ds.clean_targets + scale * z[1]
    logger.debug(f"Applied noise sigma={cfg.sigma} seed={cfg.seed} rms={ds.rms().tolist()}")
    return dataclasses.replace(ds, inputs=inputs, targets=targets, noise=cfg)


def assign_folds(ds: Dataset, folds: int, seed: int) -> Dataset:
    """Partition a seeded permutation into `folds` contiguous, balanced blocks."""
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if ds.M < folds:
        raise ValueError(f"Cannot split {ds.M} samples into {folds} folds")
    fold_ids = np.empty(ds.M, dtype=np.int64)
    for f, block in enumerate(np.array_split(permutation(seed, ds.M), folds)):
        fold_ids[block] = f
    return dataclasses.replace(ds, fold_ids=fold_ids, folds=folds)
