"""
The trainable symbolic network.

K parallel stacks are summed at the output. Each stack runs L operational layers over the
input (x, bias). A layer maps u to concat[W_lin u ; s ; phi(W_op u) per operator ; bias],
where s_j = prod_i max(|u_i|, eps)^E_ji, and the stack reads out W_out u^L. Gradients are
computed by hand in reverse mode over a cached forward pass.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .expr import (
    OPERATORS,
    Const,
    Expr,
    ExprSystem,
    Op,
    Prod,
    Signomial,
    Sum,
    Var,
    canonicalize,
)
from .utils import gaussian_stream

# Configure structured logging
logger = logging.getLogger(__name__)

EPS = 1e-12
INIT_STD = 5e-4
EXPONENT_MEAN = 1.0
EXPONENT_STD = 0.25
HALF_SMOOTHING = 1e-8
POLY_TARGETS = np.array([0.0, 1.0, 2.0, 3.0])
CHECKPOINT_FORMAT_VERSION = 1

Alphas = Tuple[float, float, float]


class NumericOverflowError(ArithmeticError):
    """Raised when a forward pass produces a non-finite value."""

    def __init__(self, stack: int, layer: int):
        where = "readout" if layer < 0 else f"layer {layer}"
        super().__init__(f"Non-finite activation in stack {stack}, {where}")
        self.stack = stack
        self.layer = layer


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    n: int = Field(ge=1)
    K: int = Field(default=1, ge=1)
    L: int = Field(default=1, ge=1)
    operators: Tuple[str, ...] = ()
    h_lin: int = Field(default=1, ge=1)
    h_sig: int = Field(default=1, ge=1)
    h_op: int = Field(default=1, ge=1)
    bias_value: float = 2.0

    @field_validator("operators")
    @classmethod
    def validate_operators(cls, v):
        unknown = [op for op in v if op not in OPERATORS]
        if unknown:
            raise ValueError(f"Unknown operators {unknown}; choose from {list(OPERATORS)}")
        return tuple(v)

    @field_validator("bias_value")
    @classmethod
    def validate_bias(cls, v):
        if v == 0:
            raise ValueError("bias_value must be nonzero")
        return v

    def d_in(self, layer: int) -> int:
        if layer == 0:
            return self.n + 1
        return self.h_lin + self.h_sig + self.h_op * len(self.operators) + 1

    @property
    def d_out(self) -> int:
        return self.d_in(self.L)


@dataclass(frozen=True, eq=False)
class LayerParams:
    w_lin: np.ndarray  # (h_lin, d_in)
    e_sig: np.ndarray  # (h_sig, d_in)
    w_ops: Tuple[np.ndarray, ...]  # one (h_op, d_in) per operator


@dataclass(frozen=True, eq=False)
class StackParams:
    layers: Tuple[LayerParams, ...]
    w_out: np.ndarray  # (n, d_L)


@dataclass(frozen=True, eq=False)
class NetworkParams:
    stacks: Tuple[StackParams, ...]


@dataclass(frozen=True)
class LossBreakdown:
    mae: float
    l_half: float
    l_poly: float
    l_ops: float
    total: float

    @classmethod
    def combine(
        cls, mae: float, l_half: float, l_poly: float, l_ops: float, alphas: Alphas
    ) -> "LossBreakdown":
        a1, a2, a3 = alphas
        return cls(mae, l_half, l_poly, l_ops, mae + a1 * l_half + a2 * l_poly + a3 * l_ops)


# ---- Shapes and flat vectors ----


def _shapes(cfg: NetworkConfig) -> List[Tuple[int, int]]:
    shapes: List[Tuple[int, int]] = []
    for _ in range(cfg.K):
        for layer in range(cfg.L):
            d = cfg.d_in(layer)
            shapes.append((cfg.h_lin, d))
            shapes.append((cfg.h_sig, d))
            shapes.extend((cfg.h_op, d) for _ in cfg.operators)
        shapes.append((cfg.n, cfg.d_out))
    return shapes


def param_count(cfg: NetworkConfig) -> int:
    """Number of trainable weights, exponents included."""
    return sum(r * c for r, c in _shapes(cfg))


def flatten(params: NetworkParams) -> np.ndarray:
    parts: List[np.ndarray] = []
    for stack in params.stacks:
        for layer in stack.layers:
            parts.append(layer.w_lin.ravel())
            parts.append(layer.e_sig.ravel())
            parts.extend(w.ravel() for w in layer.w_ops)
        parts.append(stack.w_out.ravel())
    return np.concatenate(parts)


def unflatten(cfg: NetworkConfig, vec: np.ndarray) -> NetworkParams:
    """Rebuild NetworkParams from a flat vector; arrays are views into `vec`."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (param_count(cfg),):
        raise ValueError(f"Expected {param_count(cfg)} weights, got {vec.shape}")
    pos = 0

    def take(r: int, c: int) -> np.ndarray:
        nonlocal pos
        block = vec[pos : pos + r * c].reshape(r, c)
        pos += r * c
        return block

    stacks = []
    for _ in range(cfg.K):
        layers = []
        for layer in range(cfg.L):
            d = cfg.d_in(layer)
            w_lin = take(cfg.h_lin, d)
            e_sig = take(cfg.h_sig, d)
            w_ops = tuple(take(cfg.h_op, d) for _ in cfg.operators)
            layers.append(LayerParams(w_lin, e_sig, w_ops))
        stacks.append(StackParams(tuple(layers), take(cfg.n, cfg.d_out)))
    return NetworkParams(tuple(stacks))


def _exponent_mask(cfg: NetworkConfig) -> np.ndarray:
    mask = []
    for _ in range(cfg.K):
        for layer in range(cfg.L):
            d = cfg.d_in(layer)
            mask.append(np.zeros(cfg.h_lin * d, dtype=bool))
            mask.append(np.ones(cfg.h_sig * d, dtype=bool))
            mask.extend(np.zeros(cfg.h_op * d, dtype=bool) for _ in cfg.operators)
        mask.append(np.zeros(cfg.n * cfg.d_out, dtype=bool))
    return np.concatenate(mask)


def init_params(cfg: NetworkConfig, seed: int) -> NetworkParams:
    """
    Draw initial weights from one seeded Gaussian stream.

    Multiplicative weights are N(0, 5e-4); signomial exponents are N(1, 0.25) so every
    signomial unit starts near the identity rather than the constant 1.
    """
    z = gaussian_stream(seed, param_count(cfg))
    is_exp = _exponent_mask(cfg)
    flat = np.where(is_exp, EXPONENT_MEAN + EXPONENT_STD * z, INIT_STD * z)
    return unflatten(cfg, flat)


def zeros_like(cfg: NetworkConfig) -> NetworkParams:
    return unflatten(cfg, np.zeros(param_count(cfg)))


# ---- Forward ----

_ACTIVATIONS = {"sin": np.sin, "abs": np.abs, "exp": np.exp, "sign": np.sign}


def _activation_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "sin":
        return np.cos(z)
    if name == "exp":
        return out
    if name == "abs":
        return np.sign(z)
    return np.zeros_like(z)


@dataclass
class _LayerCache:
    u: np.ndarray
    logs: np.ndarray
    s: np.ndarray
    z_ops: List[np.ndarray]
    o_ops: List[np.ndarray]


def _input_matrix(cfg: NetworkConfig, X: np.ndarray) -> np.ndarray:
    return np.hstack((X, np.full((X.shape[0], 1), cfg.bias_value)))


def _layer_forward(
    cfg: NetworkConfig, layer: LayerParams, u: np.ndarray
) -> Tuple[np.ndarray, _LayerCache]:
    z_lin = u @ layer.w_lin.T
    logs = np.log(np.maximum(np.abs(u), EPS))
    s = np.exp(logs @ layer.e_sig.T)
    z_ops = [u @ w.T for w in layer.w_ops]
    o_ops = [_ACTIVATIONS[name](z) for name, z in zip(cfg.operators, z_ops)]
    out = np.concatenate([z_lin, s, *o_ops, u[:, -1:]], axis=1)
    return out, _LayerCache(u, logs, s, z_ops, o_ops)


def _stack_forward(
    cfg: NetworkConfig, stack: StackParams, k: int, u0: np.ndarray
) -> Tuple[np.ndarray, List[_LayerCache], np.ndarray]:
    caches = []
    u = u0
    for l_idx, layer in enumerate(stack.layers):
        u, cache = _layer_forward(cfg, layer, u)
        if not np.all(np.isfinite(u)):
            raise NumericOverflowError(k, l_idx)
        caches.append(cache)
    y = u @ stack.w_out.T
    if not np.all(np.isfinite(y)):
        raise NumericOverflowError(k, -1)
    return y, caches, u


def forward_batch(cfg: NetworkConfig, params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Network output for a batch of states of shape (M, n)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != cfg.n:
        raise ValueError(f"Expected states of shape (M, {cfg.n}), got {X.shape}")
    u0 = _input_matrix(cfg, X)
    out = np.zeros((X.shape[0], cfg.n))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k, stack in enumerate(params.stacks):
            y, _, _ = _stack_forward(cfg, stack, k, u0)
            out += y
    return out


def forward(cfg: NetworkConfig, params: NetworkParams, x) -> np.ndarray:
    """
    Evaluate the network at one state (shape (n,)) or a batch (shape (M, n)).

    Raises:
        NumericOverflowError: If any activation is non-finite, naming stack and layer
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != cfg.n:
            raise ValueError(f"Expected a state of dimension {cfg.n}, got {arr.shape[0]}")
        return forward_batch(cfg, params, arr[None, :])[0]
    return forward_batch(cfg, params, arr)


# ---- Regularizers ----


def _half_norm(w: np.ndarray) -> float:
    return float(np.sum(np.sqrt(np.abs(w))))


def _half_grad(w: np.ndarray) -> np.ndarray:
    # sign(0) == 0 gives a zero subgradient at the origin
    return np.sign(w) / (2.0 * np.sqrt(np.abs(w) + HALF_SMOOTHING))


def _poly_dist(e: np.ndarray) -> np.ndarray:
    return np.abs(e[..., None] - POLY_TARGETS)


def _poly_norm(e: np.ndarray) -> float:
    return float(np.sum(np.min(_poly_dist(e), axis=-1)))


def _poly_grad(e: np.ndarray) -> np.ndarray:
    nearest = POLY_TARGETS[np.argmin(_poly_dist(e), axis=-1)]
    return np.sign(e - nearest)


def layer_regularizers(
    params: NetworkParams,
) -> Dict[Tuple[int, int], Tuple[float, float, float]]:
    """(l_half, l_poly, l_ops) per (stack, layer); each stack's readout counts in its last layer."""
    out: Dict[Tuple[int, int], Tuple[float, float, float]] = {}
    for k, stack in enumerate(params.stacks):
        last = len(stack.layers) - 1
        for l_idx, layer in enumerate(stack.layers):
            l_half = _half_norm(layer.w_lin)
            if l_idx == last:
                l_half += _half_norm(stack.w_out)
            l_poly = _poly_norm(layer.e_sig)
            l_ops = sum(_half_norm(w) for w in layer.w_ops)
            out[(k, l_idx)] = (l_half, l_poly, float(l_ops))
    return out


def regularizers(cfg: NetworkConfig, params: NetworkParams) -> Tuple[float, float, float]:
    """Penalties summed over every (stack, layer)."""
    per_layer = list(layer_regularizers(params).values())
    totals = np.sum(np.array(per_layer), axis=0) if per_layer else np.zeros(3)
    return float(totals[0]), float(totals[1]), float(totals[2])


# ---- Loss and gradient ----


def mean_absolute_error(pred: np.ndarray, targets: np.ndarray) -> float:
    """Batch mean of the L1 norm of the residual over output dimensions."""
    return float(np.mean(np.sum(np.abs(pred - targets), axis=1)))


def _layer_backward(
    cfg: NetworkConfig, layer: LayerParams, cache: _LayerCache, d_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[np.ndarray]]:
    h_lin, h_sig, h_op = cfg.h_lin, cfg.h_sig, cfg.h_op
    u = cache.u
    d_lin = d_out[:, :h_lin]
    d_s = d_out[:, h_lin : h_lin + h_sig]

    g_w_lin = d_lin.T @ u
    d_u = d_lin @ layer.w_lin

    weighted = d_s * cache.s
    g_e_sig = weighted.T @ cache.logs
    # d log max(|u|, eps) / du is 1/u above the clamp and 0 inside it
    live = np.abs(u) > EPS
    d_u = d_u + np.where(live, (weighted @ layer.e_sig) / np.where(live, u, 1.0), 0.0)

    g_w_ops = []
    offset = h_lin + h_sig
    for j, (name, w) in enumerate(zip(cfg.operators, layer.w_ops)):
        d_o = d_out[:, offset + j * h_op : offset + (j + 1) * h_op]
        d_z = d_o * _activation_grad(name, cache.z_ops[j], cache.o_ops[j])
        g_w_ops.append(d_z.T @ u)
        d_u = d_u + d_z @ w
    return d_u, g_w_lin, g_e_sig, g_w_ops


def loss_and_gradient(
    cfg: NetworkConfig,
    params: NetworkParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    alphas: Alphas,
) -> Tuple[LossBreakdown, NetworkParams]:
    """
    Regularized loss and its reverse-mode gradient over a full batch.

    Args:
        cfg: Network configuration
        params: Current weights
        inputs: States of shape (M, n), M >= 1
        targets: Next states of shape (M, n)
        alphas: Weights of the L1/2, integer-exponent and operator penalties

    Returns:
        (LossBreakdown, gradient with the same structure as `params`)

    Raises:
        NumericOverflowError: Propagated from the forward pass
    """
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.shape[0] < 1:
        raise ValueError("Batch must be nonempty")
    M = X.shape[0]
    a1, a2, a3 = alphas
    u0 = _input_matrix(cfg, X)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        runs = [_stack_forward(cfg, stack, k, u0) for k, stack in enumerate(params.stacks)]
        pred = np.zeros_like(Y)
        for y, _, _ in runs:
            pred += y
        mae = mean_absolute_error(pred, Y)
        d_pred = np.sign(pred - Y) / M

        grad_stacks = []
        for stack, (_, caches, u_last) in zip(params.stacks, runs):
            g_w_out = d_pred.T @ u_last + a1 * _half_grad(stack.w_out)
            d_u = d_pred @ stack.w_out
            grad_layers: List[Optional[LayerParams]] = [None] * len(stack.layers)
            for l_idx in reversed(range(len(stack.layers))):
                layer = stack.layers[l_idx]
                d_u, g_lin, g_sig, g_ops = _layer_backward(cfg, layer, caches[l_idx], d_u)
                grad_layers[l_idx] = LayerParams(
                    g_lin + a1 * _half_grad(layer.w_lin),
                    g_sig + a2 * _poly_grad(layer.e_sig),
                    tuple(g + a3 * _half_grad(w) for g, w in zip(g_ops, layer.w_ops)),
                )
            grad_stacks.append(StackParams(tuple(grad_layers), g_w_out))

    l_half, l_poly, l_ops = regularizers(cfg, params)
    loss = LossBreakdown.combine(mae, l_half, l_poly, l_ops, alphas)
    return loss, NetworkParams(tuple(grad_stacks))


# ---- Symbolic extraction ----


def _linear(weights: np.ndarray, u: List[Expr]) -> Expr:
    return canonicalize(Sum(tuple(Prod((Const(w), ui)) for w, ui in zip(weights, u))))


def _signomial(exponents: np.ndarray, u: List[Expr]) -> Expr:
    return canonicalize(Prod(tuple(Signomial(ui, e) for e, ui in zip(exponents, u))))


def extract(cfg: NetworkConfig, params: NetworkParams) -> ExprSystem:
    """
    Propagate (x0, ..., x_{n-1}, bias) symbolically through the same layer algebra as the
    forward pass and return the canonicalized output expressions.
    """
    totals: List[List[Expr]] = [[] for _ in range(cfg.n)]
    for stack in params.stacks:
        u: List[Expr] = [Var(i) for i in range(cfg.n)] + [Const(cfg.bias_value)]
        for layer in stack.layers:
            nxt: List[Expr] = [_linear(row, u) for row in layer.w_lin]
            nxt.extend(_signomial(row, u) for row in layer.e_sig)
            for name, w in zip(cfg.operators, layer.w_ops):
                nxt.extend(canonicalize(Op(name, _linear(row, u))) for row in w)
            nxt.append(Const(cfg.bias_value))
            u = nxt
        for i, row in enumerate(stack.w_out):
            totals[i].append(_linear(row, u))
    return ExprSystem(tuple(canonicalize(Sum(tuple(parts))) for parts in totals))


# ---- Checkpoints ----


def params_to_dict(params: NetworkParams) -> List[dict]:
    return [
        {
            "layers": [
                {
                    "w_lin": layer.w_lin.tolist(),
                    "e_sig": layer.e_sig.tolist(),
                    "w_ops": [w.tolist() for w in layer.w_ops],
                }
                for layer in stack.layers
            ],
            "w_out": stack.w_out.tolist(),
        }
        for stack in params.stacks
    ]


def params_from_dict(cfg: NetworkConfig, stacks: List[dict]) -> NetworkParams:
    parts: List[np.ndarray] = []
    for stack in stacks:
        for layer in stack["layers"]:
            parts.append(np.asarray(layer["w_lin"], dtype=float).ravel())
            parts.append(np.asarray(layer["e_sig"], dtype=float).ravel())
            parts.extend(np.asarray(w, dtype=float).ravel() for w in layer["w_ops"])
        parts.append(np.asarray(stack["w_out"], dtype=float).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return unflatten(cfg, flat.copy())


def save_checkpoint(
    path: Union[str, Path],
    cfg: NetworkConfig,
    params: NetworkParams,
    seed: int,
    extra: Optional[dict] = None,
) -> None:
    """Write weights as JSON; floats use the shortest repr so reloading is bit-exact."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.model_dump(mode="json"),
        "seed": int(seed),
        "stacks": params_to_dict(params),
    }
    if extra:
        doc["provenance"] = extra
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    logger.debug(f"Saved checkpoint to {path}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[NetworkConfig, NetworkParams, int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format_version {version!r}")
    cfg = NetworkConfig.model_validate(doc["config"])
    return cfg, params_from_dict(cfg, doc["stacks"]), int(doc["seed"])
