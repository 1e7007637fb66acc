"""
Full-batch Adam training with a triangular cyclic learning rate, k-fold validation and
multi-instance restarts.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .artifacts import write_csv
from .maps import Dataset, assign_folds
from .netcore import (
    LossBreakdown,
    NetworkConfig,
    NetworkParams,
    NumericOverflowError,
    flatten,
    forward_batch,
    init_params,
    loss_and_gradient,
    mean_absolute_error,
    unflatten,
)
from .utils import derive_seed

# Configure structured logging
logger = logging.getLogger(__name__)

TRAINING_LOG_COLUMNS = (
    "epoch", "train_mae", "val_mae", "l_half", "l_poly", "l_ops", "total", "lr"
)


class AllInstancesFailedError(RuntimeError):
    """Raised when every training instance of a sweep failed."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    epochs: int = Field(default=5000, ge=0)
    folds: int = Field(default=5, ge=2)
    instances: int = Field(default=20, ge=1)
    lr_min: float = Field(default=0.028, gt=0)
    lr_max: float = Field(default=0.036, gt=0)
    cycle_epochs: int = Field(default=1000, ge=2)
    alphas: Tuple[float, float, float] = (0.05, 0.01, 0.0375)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    base_seed: int = 0

    @model_validator(mode="after")
    def validate_lr_range(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if any(a < 0 for a in self.alphas):
            raise ValueError("Regularization weights must be nonnegative")
        return self


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_mae: float
    lr: float


@dataclass(frozen=True, eq=False)
class TrainedModel:
    params: NetworkParams
    best_val_mae: float
    convergence_epoch: int
    fold_id: int
    instance_id: int
    loss_history: Tuple[EpochRecord, ...]
    seed: int = 0

    @property
    def val_mae_history(self) -> np.ndarray:
        return np.array([r.val_mae for r in self.loss_history])


@dataclass(frozen=True)
class FailedUnit:
    instance_id: int
    fold_id: int
    reason: str


@dataclass(frozen=True, eq=False)
class Sweep:
    """Per-instance best models (sorted by validation MAE) and the units that failed."""

    models: Tuple[TrainedModel, ...]
    failures: Tuple[FailedUnit, ...]

    @property
    def failed_instances(self) -> Tuple[int, ...]:
        return tuple(sorted({f.instance_id for f in self.failures}))


def cyclic_lr(epoch: int, cfg: TrainConfig) -> float:
    """Triangular wave from lr_min up to lr_max at half period and back, period cycle_epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    half = cfg.cycle_epochs / 2.0
    pos = epoch % cfg.cycle_epochs
    frac = pos / half if pos <= half else (cfg.cycle_epochs - pos) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


def train_fold(
    cfg_net: NetworkConfig,
    cfg_train: TrainConfig,
    ds: Dataset,
    fold: int,
    seed: int,
    init: Optional[NetworkParams] = None,
    instance_id: int = 0,
) -> TrainedModel:
    """
    Train one network on every fold except `fold` and keep the best-validation snapshot.

    Epoch 0 scores the initial weights; epoch e scores the weights after e Adam updates.
    Validation MAE carries no regularization.

    Raises:
        NumericOverflowError: If a forward pass becomes non-finite
    """
    if not 0 <= fold < ds.folds:
        raise ValueError(f"fold {fold} outside [0, {ds.folds})")
    val_mask = ds.fold_mask(fold)
    if not val_mask.any() or val_mask.all():
        raise ValueError(f"fold {fold} leaves an empty training or validation set")
    X_tr, Y_tr = ds.inputs[~val_mask], ds.targets[~val_mask]
    X_val, Y_val = ds.inputs[val_mask], ds.targets[val_mask]

    start = init if init is not None else init_params(cfg_net, seed)
    flat = flatten(start).copy()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2 = cfg_train.beta1, cfg_train.beta2

    history: List[EpochRecord] = []
    best_val = np.inf
    best_epoch = 0
    best_flat = flat.copy()

    for epoch in range(cfg_train.epochs + 1):
        params = unflatten(cfg_net, flat)
        loss, grad = loss_and_gradient(cfg_net, params, X_tr, Y_tr, cfg_train.alphas)
        val_mae = mean_absolute_error(forward_batch(cfg_net, params, X_val), Y_val)
        lr = cyclic_lr(epoch, cfg_train)
        history.append(EpochRecord(epoch, loss, val_mae, lr))
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_flat = flat.copy()
        if epoch == cfg_train.epochs:
            break

        g = flatten(grad)
        t = epoch + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        flat = flat - lr * m_hat / (np.sqrt(v_hat) + cfg_train.adam_eps)

    logger.debug(
        f"instance {instance_id} fold {fold}: best val MAE {best_val:.6g} at epoch {best_epoch}"
    )
    return TrainedModel(
        params=unflatten(cfg_net, best_flat),
        best_val_mae=float(best_val),
        convergence_epoch=best_epoch,
        fold_id=fold,
        instance_id=instance_id,
        loss_history=tuple(history),
        seed=seed,
    )


def instance_folds(ds: Dataset, cfg_train: TrainConfig, instance: int) -> Dataset:
    """Fold assignment of one instance; instance i reshuffles with seed base_seed + i."""
    return assign_folds(ds, cfg_train.folds, cfg_train.base_seed + instance)


def _train_unit(
    unit: Tuple[NetworkConfig, TrainConfig, Dataset, int, int],
) -> Union[TrainedModel, FailedUnit]:
    cfg_net, cfg_train, ds_i, instance, fold = unit
    seed = derive_seed(cfg_train.base_seed, instance, fold)
    try:
        return train_fold(cfg_net, cfg_train, ds_i, fold, seed, instance_id=instance)
    except (NumericOverflowError, FloatingPointError) as e:
        return FailedUnit(instance, fold, str(e))


def train_instance(
    cfg_net: NetworkConfig, cfg_train: TrainConfig, ds: Dataset, instance: int = 0
) -> TrainedModel:
    """
    Train every fold of one instance and return its best-validation model.

    Raises:
        AllInstancesFailedError: If any fold of the instance overflows
    """
    ds_i = instance_folds(ds, cfg_train, instance)
    results = [_train_unit((cfg_net, cfg_train, ds_i, instance, f)) for f in range(cfg_train.folds)]
    failed = [r for r in results if isinstance(r, FailedUnit)]
    if failed:
        raise AllInstancesFailedError(f"Instance {instance} failed: {failed[0].reason}")
    return min(results, key=lambda r: (r.best_val_mae, r.fold_id))


def run_sweep(
    cfg_net: NetworkConfig, cfg_train: TrainConfig, ds: Dataset, workers: int = 1
) -> Sweep:
    """
    Train every (instance, fold) unit and keep each instance's best fold model.

    Instance i reshuffles folds with seed base_seed + i. An instance with any overflowing
    fold is marked failed and skipped. Reduction order is (instance, fold) regardless of
    completion order.
    """
    units = []
    for i in range(cfg_train.instances):
        ds_i = instance_folds(ds, cfg_train, i)
        units.extend((cfg_net, cfg_train, ds_i, i, f) for f in range(cfg_train.folds))

    t0 = time.time()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_unit, units))
    else:
        results = [_train_unit(u) for u in units]

    failures: List[FailedUnit] = []
    models: List[TrainedModel] = []
    for i in range(cfg_train.instances):
        mine = results[i * cfg_train.folds : (i + 1) * cfg_train.folds]
        failed = [r for r in mine if isinstance(r, FailedUnit)]
        if failed:
            failures.extend(failed)
            logger.warning(f"Instance {i} failed: {failed[0].reason}")
            continue
        best = min(mine, key=lambda r: (r.best_val_mae, r.fold_id))
        models.append(best)
        logger.info(
            f"Instance {i}: best fold {best.fold_id}, val MAE {best.best_val_mae:.6g}, "
            f"convergence epoch {best.convergence_epoch}"
        )

    if not models:
        raise AllInstancesFailedError(f"All {cfg_train.instances} training instances failed")
    models.sort(key=lambda r: (r.best_val_mae, r.instance_id))
    logger.info(
        f"Trained {len(units)} units in {time.time() - t0:.1f}s; "
        f"{len(models)} instances kept, {cfg_train.instances - len(models)} failed"
    )
    return Sweep(tuple(models), tuple(failures))


def run_instances(
    cfg_net: NetworkConfig, cfg_train: TrainConfig, ds: Dataset, workers: int = 1
) -> List[TrainedModel]:
    """One model per non-failed instance, sorted by best validation MAE ascending."""
    return list(run_sweep(cfg_net, cfg_train, ds, workers=workers).models)


def training_log_rows(model: TrainedModel) -> List[Sequence[float]]:
    return [
        (r.epoch, r.loss.mae, r.val_mae, r.loss.l_half, r.loss.l_poly, r.loss.l_ops,
         r.loss.total, r.lr)
        for r in model.loss_history
    ]


def write_training_log(path: Union[str, Path], model: TrainedModel, provenance: str = "") -> None:
    """Per-epoch log: epoch,train_mae,val_mae,l_half,l_poly,l_ops,total,lr."""
    write_csv(path, TRAINING_LOG_COLUMNS, training_log_rows(model), provenance=provenance)
