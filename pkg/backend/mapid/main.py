"""
Command-line entry point: `python -m mapid <command>`.

Commands:
    generate    simulate a map and write a trajectory or pair CSV
    experiment  run the full identification pipeline over every noise level
    evaluate    score an expression file against data
    simplify    run AIC snapping and OLS refinement on a checkpoint
    train       train one instance and write its checkpoint

Exit codes: 0 success, 1 runtime failure, 2 usage or parse error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import TypeAdapter, ValidationError

from .artifacts import (
    config_hash,
    provenance_line,
    read_dataset,
    write_csv,
    write_dataset_csv,
    write_json,
    write_text,
    write_trajectory_csv,
)
from .config import PRESETS, ConfigError, ExperimentConfig, load_config, parse_flat
from .evaluation import evaluate_expression
from .expr import ExprParseError, parse_system
from .maps import (
    Dataset,
    DimensionMismatchError,
    MapSpec,
    NoiseConfig,
    Trajectory,
    add_noise,
    sample_linspace,
    trajectory_dataset,
)
from .models import Provenance
from .netcore import extract, load_checkpoint, save_checkpoint
from .orchestrator import ExperimentRunner, build_dataset
from .settings import Settings
from .simplify import ols_refine, select, simplification_report
from .train import train_instance, write_training_log

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
MAP_KINDS = ("logistic", "gaussian", "tinkerbell", "custom")
MAP_PARAMETERS = ("r", "alpha", "beta", "a", "b", "c", "d")
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    """Raised for argument combinations argparse cannot reject on its own."""


# ---- Shared argument groups ----


def _add_map_arguments(p: argparse.ArgumentParser, required: bool) -> None:
    g = p.add_argument_group("map and sampling")
    g.add_argument("--map", choices=MAP_KINDS, required=required)
    g.add_argument("--expr", action="append", help="custom map component, once per dimension")
    for name in MAP_PARAMETERS:
        g.add_argument(f"--{name}", type=float, help=f"map parameter {name}")
    g.add_argument("--x0", type=float, nargs="+", help="initial state for trajectory sampling")
    g.add_argument("--steps", type=int, default=1000, help="trajectory length (map applications)")
    g.add_argument("--linspace", type=float, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--m", type=int, default=1000, help="sample count for --linspace")
    g.add_argument("--sigma", type=float, default=0.0, help="relative noise level")
    g.add_argument("--seed", type=int, help="noise seed (default MAPID_SEED or 0)")


def _add_config_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="experiment config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key, e.g. --set train.instances=3",
    )
    p.add_argument("--instances", type=int, help="instances per noise level")
    p.add_argument("--epochs", type=int, help="training epochs per fold")
    p.add_argument("--out", help="output directory")


def _map_from_args(args: argparse.Namespace) -> MapSpec:
    doc: Dict[str, object] = {"kind": args.map}
    doc.update({k: getattr(args, k) for k in MAP_PARAMETERS if getattr(args, k) is not None})
    if args.expr:
        doc["exprs"] = tuple(args.expr)
    return TypeAdapter(MapSpec).validate_python(doc)


def _default_x0(spec) -> List[float]:
    for preset in PRESETS.values():
        if preset["map"]["kind"] == spec.kind and preset["sampling"]["kind"] == "trajectory":
            return list(preset["sampling"]["x0"])
    raise UsageError(f"--x0 is required for {spec.kind} maps")


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    env = Settings().seed
    return env if env is not None else 0


def _dataset_from_args(args: argparse.Namespace, spec) -> Dataset:
    if args.linspace is not None:
        lo, hi = args.linspace
        clean = sample_linspace(spec, lo, hi, args.m)
    else:
        x0 = args.x0 if args.x0 is not None else _default_x0(spec)
        clean = trajectory_dataset(spec, x0, args.steps)
    return add_noise(clean, NoiseConfig(sigma=args.sigma, seed=_seed(args)))


def _data_and_map(args: argparse.Namespace):
    """Dataset from --data or from map arguments; the map is None when only --data is given."""
    spec = _map_from_args(args) if args.map else None
    if args.data:
        return read_dataset(args.data), spec
    if spec is None:
        raise UsageError("either --data or --map is required")
    return _dataset_from_args(args, spec), spec


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = parse_flat("\n".join(args.overrides))
    if args.instances is not None:
        overrides["train.instances"] = str(args.instances)
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.out is not None:
        overrides["output_dir"] = args.out
    return load_config(args.config, preset=args.preset, overrides=overrides)


def _check_dim(expected: int, ds: Dataset, what: str) -> None:
    if ds.dim != expected:
        raise DimensionMismatchError(f"{what} has dimension {expected}, data has {ds.dim}")


# ---- Commands ----


def cmd_generate(args: argparse.Namespace) -> int:
    spec = _map_from_args(args)
    ds = _dataset_from_args(args, spec)
    seed = _seed(args)
    header = provenance_line(
        config_hash({"map": spec.model_dump(mode="json"), "sigma": args.sigma}), seed
    )
    if isinstance(ds.sampling, Trajectory) and not args.pairs:
        states = np.vstack((ds.inputs, ds.targets[-1:]))
        write_trajectory_csv(args.out, states, header)
    else:
        write_dataset_csv(args.out, ds, header)
    rms = ", ".join(f"{v:.6g}" for v in ds.rms())
    print(f"M={ds.M} dim={ds.dim} rms=[{rms}] -> {args.out}")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    workers = args.workers if args.workers is not None else Settings().workers
    report = ExperimentRunner(cfg, workers=workers).run()
    for r in report.records:
        if r.status == "ok":
            print(f"sigma={r.sigma:g} rrmse={r.rrmse:.6g} expression: {r.expression_text}")
        else:
            print(f"sigma={r.sigma:g} FAILED: {r.error}")
    return EXIT_FAILURE if report.failed else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    expr = parse_system(Path(args.expression).read_text(encoding="utf-8"))
    ds, spec = _data_and_map(args)
    _check_dim(expr.dim, ds, "Expression")
    report = evaluate_expression(expr, ds, spec=spec, steps=args.shadow_steps, gap=args.gap)
    report = report.model_copy(
        update={"provenance": Provenance(config_hash=config_hash(expr.format(True)), seed=0)}
    )
    if args.out:
        write_json(args.out, report)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_simplify(args: argparse.Namespace) -> int:
    cfg_net, params, seed = load_checkpoint(args.checkpoint)
    ds, _ = _data_and_map(args)
    _check_dim(cfg_net.n, ds, "Checkpoint")
    sr = select(extract(cfg_net, params), ds)
    refined = None if args.no_refine else ols_refine(sr, ds)
    final = refined.expr if refined is not None else sr.expr
    provenance = Provenance(config_hash=config_hash(cfg_net), seed=seed)
    if args.out:
        out = Path(args.out)
        header = provenance_line(provenance.config_hash, seed)
        write_text(out / "aic.expr", f"{header}\n{sr.expr.format(exact=True)}\n")
        write_text(out / "refined.expr", f"{header}\n{final.format(exact=True)}\n")
        write_json(
            out / "simplification.json",
            simplification_report(sr, refined).model_copy(update={"provenance": provenance}),
        )
    print(f"chosen threshold {sr.best.threshold:.6g}")
    print(final.format(exact=True))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    ds = add_noise(build_dataset(cfg), cfg.noise_config(0))
    model = train_instance(cfg.network, cfg.train_config, ds, args.instance)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / cfg.name / "train"
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg.model_dump(mode="json", exclude={"output_dir"}))
    header = provenance_line(cfg_hash, cfg.base_seed)
    save_checkpoint(
        out / "checkpoint.json", cfg.network, model.params, model.seed,
        extra={"config_hash": cfg_hash, "seed": cfg.base_seed, "tool": "mapid"},
    )
    write_training_log(out / "training_log.csv", model, header)
    write_csv(
        out / "best.csv",
        ("instance_id", "fold_id", "best_val_mae", "convergence_epoch"),
        [(model.instance_id, model.fold_id, model.best_val_mae, model.convergence_epoch)],
        header,
    )
    print(
        f"instance {model.instance_id}: fold {model.fold_id}, val MAE {model.best_val_mae:.6g} "
        f"at epoch {model.convergence_epoch} -> {out}"
    )
    print(extract(cfg.network, model.params).format())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapid", description="Identify iterated maps from data with symbolic networks."
    )
    parser.add_argument(
        "--log-level", default=None, help="logging level (default MAPID_LOG_LEVEL or INFO)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a map and write CSV data")
    _add_map_arguments(p, required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--pairs", action="store_true", help="write input/output pairs with folds")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("experiment", help="run the identification pipeline")
    _add_config_arguments(p)
    p.add_argument("--workers", type=int, help="training worker processes")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("evaluate", help="score an expression file")
    p.add_argument("expression", help="file with one expression per state dimension")
    p.add_argument("--data", help="trajectory or pair CSV")
    _add_map_arguments(p, required=False)
    p.add_argument("--shadow-steps", type=int, default=30)
    p.add_argument("--gap", type=float, default=0.05)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simplify", help="snap and refine a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="trajectory or pair CSV")
    _add_map_arguments(p, required=False)
    p.add_argument("--no-refine", action="store_true", help="skip OLS refinement")
    p.add_argument("--out", help="directory for expression files and report")
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser("train", help="train one instance on the first noise level")
    _add_config_arguments(p)
    p.add_argument("--instance", type=int, default=0)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    level = (args.log_level or Settings().log_level).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT)

    try:
        return args.func(args)
    except (
        ExprParseError,
        ConfigError,
        ValidationError,
        UsageError,
        DimensionMismatchError,
        FileNotFoundError,
    ) as e:
        logger.error(f"{args.command}: {e}")
        print(f"mapid {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
