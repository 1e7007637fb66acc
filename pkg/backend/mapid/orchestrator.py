import logging
import math
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Deque, Dict, Iterator, List, Optional, Union

import numpy as np

from .artifacts import (
    config_hash,
    provenance_line,
    read_dataset,
    write_csv,
    write_dataset_csv,
    write_json,
    write_text,
)
from .config import ExperimentConfig
from .evaluation import (
    ZeroDenominatorError,
    default_start,
    evaluate_expression,
    export_portrait,
    model_trajectory,
    rrmse,
)
from .expr import ExprSystem
from .maps import (
    Dataset,
    External,
    LinSpace,
    TrajectoryEscapedError,
    add_noise,
    generate_trajectory,
    sample_linspace,
    trajectory_dataset,
)
from .models import EvalReport, ExperimentReport, InstanceRecord, Provenance, SigmaRecord
from .netcore import extract, param_count, save_checkpoint
from .plots import plot_rrmse_strip, plot_state_space, plot_trajectories
from .settings import Settings
from .simplify import (
    RefinedModel,
    SelectionError,
    SimplificationResult,
    expression_text,
    ols_refine,
    select,
    simplification_report,
)
from .train import TrainedModel, instance_folds, run_sweep, write_training_log

# Configure structured logging
logger = logging.getLogger(__name__)

RESULTS_COLUMNS = ("sigma", "expression", "val_mae", "rrmse", "true_rrmse", "convergence_epoch")
INSTANCE_COLUMNS = (
    "instance_id", "fold_id", "best_val_mae", "convergence_epoch", "aic_rrmse", "refined_rrmse",
    "val_rrmse",
)


class StageMetrics:
    """
    Wall-clock timings per pipeline stage.

    Timings are logged only; reports stay free of them so reruns are byte-identical.
    """

    def __init__(self, buffer_size: int = 1000):
        self.buffer_size = buffer_size
        self.timings: Dict[str, Deque[float]] = defaultdict(lambda: deque(maxlen=buffer_size))

    def add(self, stage: str, seconds: float) -> None:
        self.timings[stage].append(seconds)

    @contextmanager
    def time(self, stage: str) -> Iterator[None]:
        t0 = time.time()
        try:
            yield
        finally:
            self.add(stage, time.time() - t0)

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for stage, values in self.timings.items():
            arr = np.array(values, dtype=float)
            out[stage] = {
                "count": int(arr.size),
                "total_s": round(float(arr.sum()), 3),
                "avg_s": round(float(arr.mean()), 3) if arr.size else 0.0,
            }
        return out


@dataclass(frozen=True, eq=False)
class Identified:
    """One instance's model carried through simplification, with its scores."""

    model: TrainedModel
    selection: SimplificationResult
    refined: Optional[RefinedModel]
    folded: Dataset
    aic_rrmse: float
    rrmse: float
    val_rrmse: float

    @property
    def expr(self) -> ExprSystem:
        return self.refined.expr if self.refined is not None else self.selection.expr


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Clean dataset for the configured sampling protocol."""
    sampling = cfg.sampling
    if isinstance(sampling, External):
        return read_dataset(sampling.source)
    if isinstance(sampling, LinSpace):
        return sample_linspace(cfg.map, sampling.lo, sampling.hi, sampling.M)
    return trajectory_dataset(cfg.map, sampling.x0, sampling.steps)


def sigma_dirname(sigma: float) -> str:
    return f"sigma_{sigma:g}"


def _blank(v: Any) -> Any:
    return "" if v is None else v


class ExperimentRunner:
    """
    Runs the full identification pipeline for every noise level of an experiment.

    Per sigma: noisy dataset, multi-instance k-fold training, AIC snapping, optional OLS
    refinement, cross-instance selection by validation RRMSE, evaluation and file output.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        output_dir: Optional[Union[str, Path]] = None,
        workers: Optional[int] = None,
    ):
        """
        Args:
            cfg: Validated experiment configuration
            output_dir: Parent directory for results (defaults to cfg.output_dir)
            workers: Training worker-pool size (defaults to MAPID_WORKERS)
        """
        self.cfg = cfg
        root = Path(output_dir) if output_dir is not None else Path(cfg.output_dir)
        self.output_dir = root / cfg.name
        self.workers = workers if workers is not None else Settings().workers
        self.metrics = StageMetrics()
        # Where results land is not part of the experiment's identity
        cfg_hash = config_hash(cfg.model_dump(mode="json", exclude={"output_dir"}))
        self.provenance = Provenance(config_hash=cfg_hash, seed=cfg.base_seed)
        self.header = provenance_line(cfg_hash, cfg.base_seed)

    def run(self) -> ExperimentReport:
        t0 = time.time()
        with self.metrics.time("dataset"):
            clean = build_dataset(self.cfg)
        logger.info(
            f"Experiment {self.cfg.name!r}: {clean.M} samples, dim {clean.dim}, "
            f"sigmas {list(self.cfg.sigmas)}"
        )
        records = [self.run_sigma(i, clean) for i in range(len(self.cfg.sigmas))]
        report = ExperimentReport(
            name=self.cfg.name,
            map=self.cfg.map.model_dump(mode="json"),
            param_count=param_count(self.cfg.network),
            provenance=self.provenance,
            records=records,
        )
        self.write_report(report)
        self._log_summary(report, time.time() - t0)
        return report

    def run_sigma(self, index: int, clean: Dataset) -> SigmaRecord:
        """Run one noise level; any stage failure is recorded instead of raised."""
        sigma = self.cfg.sigmas[index]
        try:
            ds = add_noise(clean, self.cfg.noise_config(index))
            return self._run_sigma(sigma, ds, self.output_dir / sigma_dirname(sigma))
        except Exception as e:
            logger.error(f"sigma={sigma:g} failed: {e}", exc_info=True)
            return SigmaRecord(sigma=sigma, status="failed", error=f"{type(e).__name__}: {e}")

    def _run_sigma(self, sigma: float, ds: Dataset, out: Path) -> SigmaRecord:
        cfg = self.cfg
        logger.info(f"sigma={sigma:g}: training {cfg.train.instances} x {cfg.train.folds} units")
        with self.metrics.time("train"):
            sweep = run_sweep(cfg.network, cfg.train_config, ds, workers=self.workers)

        refine_each = cfg.refine and not cfg.refine_best_only
        identified: List[Identified] = []
        errors: Dict[int, str] = {}
        with self.metrics.time("simplify"):
            for model in sweep.models:
                try:
                    identified.append(self._identify(model, ds, refine_each))
                except (SelectionError, ArithmeticError, ZeroDenominatorError) as e:
                    logger.warning(f"Instance {model.instance_id} dropped: {e}")
                    errors[model.instance_id] = f"{type(e).__name__}: {e}"
        if not identified:
            raise SelectionError(f"No instance produced a usable expression at sigma={sigma:g}")

        winner = min(identified, key=lambda r: (r.val_rrmse, r.model.instance_id))
        if cfg.refine and cfg.refine_best_only:
            with self.metrics.time("refine"):
                winner = self._score(
                    winner.model, ds, winner.selection, ols_refine(winner.selection, ds)
                )
            identified = [
                winner if r.model.instance_id == winner.model.instance_id else r
                for r in identified
            ]
        logger.info(
            f"sigma={sigma:g}: instance {winner.model.instance_id} chosen "
            f"(val RRMSE {winner.val_rrmse:.6g}): {expression_text(winner.expr)}"
        )

        with self.metrics.time("evaluate"):
            ev = evaluate_expression(
                winner.expr,
                ds,
                spec=cfg.map,
                val_mae=winner.model.best_val_mae,
                steps=cfg.shadow_steps,
                gap=cfg.shadow_gap,
            ).model_copy(update={"provenance": self.provenance})

        instances = [self._instance_record(r) for r in identified]
        instances += [InstanceRecord(instance_id=i, error=msg) for i, msg in errors.items()]
        for failure in sweep.failures:
            if failure.instance_id not in {r.instance_id for r in instances}:
                instances.append(
                    InstanceRecord(
                        instance_id=failure.instance_id,
                        fold_id=failure.fold_id,
                        error=failure.reason,
                    )
                )
        instances.sort(key=lambda r: r.instance_id)

        with self.metrics.time("write"):
            self._write_sigma(out, ds, winner, identified, ev)

        refined = winner.refined
        return SigmaRecord(
            sigma=sigma,
            aic_expression_text=expression_text(winner.selection.expr, exact=True),
            expression_text=expression_text(winner.expr, exact=True),
            chosen_threshold=winner.selection.best.threshold,
            val_mae=winner.model.best_val_mae,
            aic_rrmse=winner.aic_rrmse,
            rrmse=ev.rrmse,
            true_rrmse=ev.true_rrmse,
            clean_rrmse=ev.clean_rrmse,
            convergence_epoch=winner.model.convergence_epoch,
            shadow_steps=ev.shadow_steps,
            escaped=ev.escaped,
            condition_flag=refined.condition_flag if refined is not None else False,
            best_instance=winner.model.instance_id,
            excluded_instances=len(sweep.failed_instances) + len(errors),
            instances=instances,
        )

    def _identify(self, model: TrainedModel, ds: Dataset, refine: bool) -> Identified:
        system = extract(self.cfg.network, model.params)
        sr = select(system, ds)
        return self._score(model, ds, sr, ols_refine(sr, ds) if refine else None)

    def _score(
        self,
        model: TrainedModel,
        ds: Dataset,
        sr: SimplificationResult,
        refined: Optional[RefinedModel],
    ) -> Identified:
        folded = instance_folds(ds, self.cfg.train_config, model.instance_id)
        expr = refined.expr if refined is not None else sr.expr
        return Identified(
            model=model,
            selection=sr,
            refined=refined,
            folded=folded,
            aic_rrmse=rrmse(sr.expr, ds),
            rrmse=rrmse(expr, ds),
            val_rrmse=rrmse(expr, folded, folded.fold_mask(model.fold_id)),
        )

    @staticmethod
    def _instance_record(r: Identified) -> InstanceRecord:
        return InstanceRecord(
            instance_id=r.model.instance_id,
            fold_id=r.model.fold_id,
            best_val_mae=r.model.best_val_mae,
            convergence_epoch=r.model.convergence_epoch,
            aic_expression_text=expression_text(r.selection.expr, exact=True),
            aic_rrmse=r.aic_rrmse,
            refined_expression_text=expression_text(r.expr, exact=True),
            refined_rrmse=r.rrmse,
            val_rrmse=r.val_rrmse,
        )

    # ---- Output ----

    def _write_expr(self, path: Path, expr: ExprSystem) -> None:
        write_text(path, f"{self.header}\n{expr.format(exact=True)}\n")

    def _write_sigma(
        self,
        out: Path,
        ds: Dataset,
        winner: Identified,
        identified: List[Identified],
        ev: EvalReport,
    ) -> None:
        cfg = self.cfg
        out.mkdir(parents=True, exist_ok=True)
        self._write_expr(out / "aic.expr", winner.selection.expr)
        self._write_expr(out / "refined.expr", winner.expr)
        write_json(
            out / "simplification.json",
            simplification_report(winner.selection, winner.refined).model_copy(
                update={"provenance": self.provenance}
            ),
        )
        write_json(out / "eval.json", ev)
        write_dataset_csv(out / "dataset.csv", winner.folded, self.header)
        write_training_log(out / "training_log.csv", winner.model, self.header)
        save_checkpoint(
            out / "checkpoint.json",
            cfg.network,
            winner.model.params,
            winner.model.seed,
            extra=self.provenance.model_dump(),
        )
        write_csv(
            out / "instances.csv",
            INSTANCE_COLUMNS,
            (
                (r.model.instance_id, r.model.fold_id, r.model.best_val_mae,
                 r.model.convergence_epoch, r.aic_rrmse, r.rrmse, r.val_rrmse)
                for r in sorted(identified, key=lambda r: r.model.instance_id)
            ),
            self.header,
        )

        portrait = export_portrait(winner.expr, cfg.map, cfg.portrait.box(), cfg.portrait.grid)
        write_csv(out / "portrait.csv", portrait.header, portrait.rows, self.header)

        x0 = default_start(ds)
        try:
            truth = generate_trajectory(cfg.map, x0, cfg.shadow_steps)
        except TrajectoryEscapedError as e:
            truth = e.trajectory
        model_traj, _ = model_trajectory(winner.expr, x0, cfg.shadow_steps)
        write_csv(
            out / "trajectory.csv",
            ["t"] + [f"x{j}_true" for j in range(ds.dim)] + [f"x{j}_model" for j in range(ds.dim)],
            trajectory_rows(truth, model_traj, cfg.shadow_steps),
            self.header,
        )

        try:
            plot_state_space(out / "state_space.svg", ds.inputs, ds.targets, portrait)
            plot_trajectories(out / "trajectory.svg", truth, model_traj)
            plot_rrmse_strip(
                out / "rrmse_by_instance.svg",
                [r.aic_rrmse for r in identified],
                [r.rrmse for r in identified],
            )
        except Exception as e:
            logger.warning(f"Plot rendering failed in {out}: {e} - CSV data is still written")
        logger.info(f"Wrote results to {out}")

    def write_report(self, report: ExperimentReport) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.output_dir / "report.json", report)
        write_csv(
            self.output_dir / "results.csv",
            RESULTS_COLUMNS,
            (
                (r.sigma, _blank(r.expression_text), _blank(r.val_mae), _blank(r.rrmse),
                 _blank(r.true_rrmse), _blank(r.convergence_epoch))
                for r in report.records
            ),
            self.header,
        )

    def _log_summary(self, report: ExperimentReport, elapsed: float) -> None:
        logger.info("=" * 60)
        logger.info(f"EXPERIMENT {report.name.upper()} COMPLETE in {elapsed:.1f}s")
        logger.info("=" * 60)
        for r in report.records:
            if r.status == "ok":
                logger.info(
                    f"sigma={r.sigma:g}: RRMSE {r.rrmse:.4%} (true {r.true_rrmse:.4%}), "
                    f"shadow {r.shadow_steps} steps: {r.expression_text}"
                )
            else:
                logger.warning(f"sigma={r.sigma:g}: FAILED ({r.error})")
        for stage, s in self.metrics.summary().items():
            logger.info(f"  {stage:<9} {s['total_s']:>9.3f}s over {s['count']} run(s)")
        if report.failed:
            logger.warning("Every noise level failed")
        logger.info("=" * 60)


def trajectory_rows(truth: np.ndarray, model: np.ndarray, steps: int) -> List[List[float]]:
    """Side-by-side true and model states; an escaped or short trajectory pads with NaN."""
    n = truth.shape[1]
    rows = []
    for t in range(steps + 1):
        a = truth[t] if t < len(truth) else np.full(n, math.nan)
        b = model[t] if t < len(model) else np.full(n, math.nan)
        rows.append([t, *a, *b])
    return rows
