"""End-to-end integration tests for the identification pipeline."""

import json

import numpy as np

import mapid.orchestrator as orchestrator
import mapid.train as train_module
from mapid.artifacts import read_csv, read_dataset
from mapid.evaluation import ZeroDenominatorError
from mapid.expr import parse_system
from mapid.main import EXIT_FAILURE, EXIT_OK, main
from mapid.netcore import NumericOverflowError, extract, load_checkpoint
from mapid.orchestrator import ExperimentRunner, StageMetrics, trajectory_rows
from mapid.simplify import select
from mapid.train import AllInstancesFailedError

SIGMA_FILES = (
    "aic.expr",
    "refined.expr",
    "simplification.json",
    "eval.json",
    "dataset.csv",
    "training_log.csv",
    "checkpoint.json",
    "instances.csv",
    "portrait.csv",
    "trajectory.csv",
    "state_space.svg",
    "trajectory.svg",
    "rrmse_by_instance.svg",
)

TINY_ARGS = [
    "--preset", "logistic",
    "--set", "sigmas=0",
    "--set", "sampling.steps=80",
    "--set", "train.folds=2",
    "--set", "train.cycle_epochs=20",
    "--set", "shadow_steps=10",
    "--set", "portrait.grid=11",
    "--instances", "2",
    "--epochs", "40",
]


def test_end_to_end_experiment(tiny_config, tmp_path):
    """Complete run: train -> snap -> refine -> evaluate -> artifacts."""

    # 1. Run the experiment
    report = ExperimentRunner(tiny_config, output_dir=tmp_path, workers=1).run()
    record = report.records[0]
    assert record.status == "ok", record.error
    assert not report.failed
    assert report.param_count == 13

    # 2. Every per-sigma artifact exists
    out = tmp_path / "logistic" / "sigma_0"
    for name in SIGMA_FILES:
        assert (out / name).exists(), f"missing {name}"
    assert (tmp_path / "logistic" / "report.json").exists()

    # 3. CSV and expression files open with the provenance line
    for name in ("aic.expr", "refined.expr", "dataset.csv", "instances.csv", "portrait.csv"):
        first = (out / name).read_text(encoding="utf-8").splitlines()[0]
        assert first == f"# mapid config_hash={report.provenance.config_hash} seed=0"

    # 4. Per-instance diagnostics cover every instance
    assert [r.instance_id for r in record.instances] == [0, 1]
    _, rows = read_csv(out / "instances.csv")
    assert len(rows) == 2
    assert record.excluded_instances == 0

    # 5. Reported numbers agree with the files
    evaluated = json.loads((out / "eval.json").read_text(encoding="utf-8"))
    assert evaluated["rrmse"] == record.rrmse
    assert 0 <= record.shadow_steps <= 10
    header, results = read_csv(tmp_path / "logistic" / "results.csv")
    assert header == ["sigma", "expression", "val_mae", "rrmse", "true_rrmse", "convergence_epoch"]
    assert len(results) == 1


def test_checkpoint_reproduces_aic_expression(tiny_config, tmp_path):
    """Re-simplifying the saved checkpoint on the saved dataset gives the saved expression."""
    ExperimentRunner(tiny_config, output_dir=tmp_path, workers=1).run()
    out = tmp_path / "logistic" / "sigma_0"

    cfg, params, _ = load_checkpoint(out / "checkpoint.json")
    ds = read_dataset(out / "dataset.csv")
    again = select(extract(cfg, params), ds).expr

    saved = parse_system((out / "aic.expr").read_text(encoding="utf-8"))
    assert again == saved


def test_reports_are_byte_identical_across_reruns(tiny_config, tmp_path):
    ExperimentRunner(tiny_config, output_dir=tmp_path / "a", workers=1).run()
    ExperimentRunner(tiny_config, output_dir=tmp_path / "b", workers=1).run()
    for name in ("report.json", "results.csv"):
        a = (tmp_path / "a" / "logistic" / name).read_bytes()
        b = (tmp_path / "b" / "logistic" / name).read_bytes()
        assert a == b, f"{name} differs between reruns"
    for name in ("refined.expr", "simplification.json", "training_log.csv"):
        a = (tmp_path / "a" / "logistic" / "sigma_0" / name).read_bytes()
        b = (tmp_path / "b" / "logistic" / "sigma_0" / name).read_bytes()
        assert a == b, f"{name} differs between reruns"


def test_failed_instance_is_reported(tiny_config, tmp_path, monkeypatch):
    real = train_module.train_fold

    def flaky(cfg_net, cfg_train, ds, fold, seed, init=None, instance_id=0):
        if instance_id == 0:
            raise NumericOverflowError(0, 0)
        return real(cfg_net, cfg_train, ds, fold, seed, init=init, instance_id=instance_id)

    monkeypatch.setattr(train_module, "train_fold", flaky)
    record = ExperimentRunner(tiny_config, output_dir=tmp_path, workers=1).run().records[0]
    assert record.status == "ok"
    assert record.best_instance == 1
    assert record.excluded_instances == 1
    failed = [r for r in record.instances if r.error]
    assert [r.instance_id for r in failed] == [0]


def test_zero_validation_targets_drop_only_that_instance(tiny_config, tmp_path, monkeypatch):
    real = orchestrator.rrmse
    raised = []

    def zero_fold_once(expr, ds, mask=None):
        if mask is not None and not raised:
            raised.append(True)
            raise ZeroDenominatorError("Validation targets are all zero")
        return real(expr, ds, mask)

    monkeypatch.setattr(orchestrator, "rrmse", zero_fold_once)
    record = ExperimentRunner(tiny_config, output_dir=tmp_path, workers=1).run().records[0]
    assert record.status == "ok", record.error
    assert record.excluded_instances == 1
    failed = [r for r in record.instances if r.error]
    assert len(failed) == 1
    assert "ZeroDenominatorError" in failed[0].error
    assert record.best_instance != failed[0].instance_id


def test_failed_sigma_is_recorded(tiny_config, tmp_path, monkeypatch):
    def no_survivors(*args, **kwargs):
        raise AllInstancesFailedError("All 2 training instances failed")

    monkeypatch.setattr(orchestrator, "run_sweep", no_survivors)
    report = ExperimentRunner(tiny_config, output_dir=tmp_path, workers=1).run()
    assert report.failed
    assert report.records[0].status == "failed"
    assert "AllInstancesFailedError" in report.records[0].error
    _, rows = read_csv(tmp_path / "logistic" / "results.csv")
    assert rows[0][1] == ""


def test_cli_experiment(tmp_path, capsys):
    code = main(["experiment", *TINY_ARGS, "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "sigma=0 rrmse=" in capsys.readouterr().out
    assert (tmp_path / "logistic" / "report.json").exists()


def test_cli_experiment_failure_exit_code(tmp_path, monkeypatch):
    def no_survivors(*args, **kwargs):
        raise AllInstancesFailedError("no instance survived")

    monkeypatch.setattr(orchestrator, "run_sweep", no_survivors)
    assert main(["experiment", *TINY_ARGS, "--out", str(tmp_path)]) == EXIT_FAILURE


def test_cli_experiment_from_config_file(tmp_path):
    cfg_file = tmp_path / "tiny.cfg"
    cfg_file.write_text(
        "# tiny logistic run\n"
        "preset = logistic\n"
        "name = tiny\n"
        "sigmas = 0\n"
        "sampling.steps = 60\n"
        "train.folds = 2\n"
        "train.instances = 1\n"
        "train.epochs = 20\n"
        "shadow_steps = 5\n"
        "portrait.grid = 5\n",
        encoding="utf-8",
    )
    assert main(["experiment", str(cfg_file), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "tiny" / "sigma_0" / "refined.expr").exists()


def test_stage_metrics_summary():
    metrics = StageMetrics(buffer_size=2)
    for seconds in (1.0, 2.0, 3.0):
        metrics.add("train", seconds)
    with metrics.time("write"):
        pass
    summary = metrics.summary()
    assert summary["train"] == {"count": 2, "total_s": 5.0, "avg_s": 2.5}
    assert summary["write"]["count"] == 1


def test_trajectory_rows_pad_escaped_model():
    truth = np.zeros((4, 1))
    model = np.ones((2, 1))
    rows = trajectory_rows(truth, model, 3)
    assert len(rows) == 4
    assert rows[1] == [1, 0.0, 1.0]
    assert np.isnan(rows[3][2])
