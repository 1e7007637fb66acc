"""Command-line surface: exit codes, file formats and provenance headers."""

import json

import numpy as np
import pytest

from mapid.artifacts import read_csv, read_dataset
from mapid.expr import parse_system
from mapid.main import EXIT_OK, EXIT_USAGE, main
from mapid.maps import LogisticMap
from mapid.netcore import NetworkConfig, load_checkpoint, param_count, save_checkpoint, unflatten

EQ_LOGISTIC = "3.874*x0 - 3.8735*|x0|^2.0094\n"


@pytest.fixture
def logistic_csv(tmp_path):
    path = tmp_path / "logistic.csv"
    args = ["generate", "--map", "logistic", "--x0", "0.5", "--steps", "200"]
    code = main(args + ["--out", str(path)])
    assert code == EXIT_OK
    return path


def test_generate_trajectory(logistic_csv, capsys):
    lines = logistic_csv.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# mapid config_hash=")
    assert lines[0].endswith(" seed=0")
    header, rows = read_csv(logistic_csv)
    assert header == ["t", "x0"]
    assert len(rows) == 201
    assert float(rows[0][1]) == 0.5
    assert float(rows[1][1]) == pytest.approx(0.975)
    ds = read_dataset(logistic_csv)
    assert ds.M == 200


def test_generate_prints_summary(tmp_path, capsys):
    out = tmp_path / "t.csv"
    main(["generate", "--map", "tinkerbell", "--steps", "50", "--out", str(out)])
    printed = capsys.readouterr().out
    assert "M=50 dim=2" in printed


def test_generate_linspace_pairs(tmp_path):
    out = tmp_path / "pairs.csv"
    code = main(
        ["generate", "--map", "gaussian", "--linspace", "-1", "1", "--m", "3", "--out", str(out)]
    )
    assert code == EXIT_OK
    header, rows = read_csv(out)
    assert header == ["x0_in", "x0_out", "fold"]
    assert [float(r[0]) for r in rows] == [-1.0, 0.0, 1.0]
    assert float(rows[1][1]) == pytest.approx(0.5)


def test_generate_noise_is_seeded(tmp_path):
    paths = [tmp_path / f"{i}.csv" for i in range(3)]
    for path, seed in zip(paths, ("7", "7", "8")):
        args = ["generate", "--map", "logistic", "--x0", "0.5", "--steps", "100"]
        main(args + ["--sigma", "0.01", "--seed", seed, "--out", str(path)])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()


def test_generate_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MAPID_SEED", "42")
    out = tmp_path / "env.csv"
    main(["generate", "--map", "logistic", "--x0", "0.5", "--steps", "10", "--out", str(out)])
    assert out.read_text(encoding="utf-8").splitlines()[0].endswith(" seed=42")


def test_generate_custom_map(tmp_path):
    out = tmp_path / "custom.csv"
    code = main(
        ["generate", "--map", "custom", "--expr", "3.9*x0 - 3.9*x0^2", "--x0", "0.5",
         "--steps", "5", "--out", str(out)]
    )
    assert code == EXIT_OK
    _, rows = read_csv(out)
    assert float(rows[1][1]) == pytest.approx(0.975)


def test_generate_requires_map(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--out", str(tmp_path / "x.csv")])
    assert info.value.code == 2


def test_evaluate_expression_file(tmp_path, logistic_csv, capsys):
    expr_file = tmp_path / "model.expr"
    expr_file.write_text("# identified\n" + EQ_LOGISTIC, encoding="utf-8")
    out = tmp_path / "eval.json"
    code = main(
        ["evaluate", str(expr_file), "--data", str(logistic_csv), "--map", "logistic",
         "--out", str(out)]
    )
    assert code == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["rrmse"] < 0.01
    assert report["true_rrmse"] == pytest.approx(0.0, abs=1e-12)
    assert 0 <= report["shadow_steps"] <= 30
    assert len(report["provenance"]["config_hash"]) == 16


def test_evaluate_without_map_reports_rrmse_only(tmp_path, logistic_csv):
    expr_file = tmp_path / "model.expr"
    expr_file.write_text(EQ_LOGISTIC, encoding="utf-8")
    out = tmp_path / "eval.json"
    assert main(["evaluate", str(expr_file), "--data", str(logistic_csv), "--out", str(out)]) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["true_rrmse"] is None
    assert report["shadow_steps"] is None


def test_evaluate_parse_error_exits_2(tmp_path, logistic_csv, capsys):
    expr_file = tmp_path / "bad.expr"
    expr_file.write_text("3.9*x0 $ 1\n", encoding="utf-8")
    code = main(["evaluate", str(expr_file), "--data", str(logistic_csv)])
    assert code == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_evaluate_dimension_mismatch_exits_2(tmp_path, logistic_csv):
    expr_file = tmp_path / "two.expr"
    expr_file.write_text("x0\nx1\n", encoding="utf-8")
    assert main(["evaluate", str(expr_file), "--data", str(logistic_csv)]) == EXIT_USAGE


def test_evaluate_needs_data_or_map(tmp_path):
    expr_file = tmp_path / "model.expr"
    expr_file.write_text(EQ_LOGISTIC, encoding="utf-8")
    assert main(["evaluate", str(expr_file)]) == EXIT_USAGE


def test_evaluate_missing_file_exits_2(tmp_path):
    assert main(["evaluate", str(tmp_path / "absent.expr"), "--map", "logistic"]) == EXIT_USAGE


def test_simplify_checkpoint(tmp_path):
    cfg = NetworkConfig(n=1)
    params = unflatten(cfg, np.array([1.0, 0.0, 2.0, 0.0, 3.9, -3.9, 0.0]))
    ckpt = tmp_path / "checkpoint.json"
    save_checkpoint(ckpt, cfg, params, seed=11)
    out = tmp_path / "simplified"
    code = main(
        ["simplify", str(ckpt), "--map", "logistic", "--x0", "0.5", "--steps", "200",
         "--out", str(out)]
    )
    assert code == EXIT_OK
    aic_text = (out / "aic.expr").read_text(encoding="utf-8")
    assert aic_text.startswith("# mapid config_hash=")
    assert " seed=11" in aic_text.splitlines()[0]
    assert parse_system(aic_text) == parse_system("3.9*x0 - 3.9*|x0|^2")
    refined = parse_system((out / "refined.expr").read_text(encoding="utf-8"))
    X = np.linspace(0.05, 0.95, 19)[:, None]
    assert np.allclose(refined.evaluate(X), LogisticMap().apply(X), atol=1e-9)
    report = json.loads((out / "simplification.json").read_text(encoding="utf-8"))
    assert len(report["candidates"]) == 11
    assert report["provenance"]["seed"] == 11


def test_simplify_dimension_mismatch(tmp_path):
    cfg = NetworkConfig(n=1)
    ckpt = tmp_path / "checkpoint.json"
    save_checkpoint(ckpt, cfg, unflatten(cfg, np.zeros(param_count(cfg))), seed=0)
    code = main(["simplify", str(ckpt), "--map", "tinkerbell", "--steps", "50"])
    assert code == EXIT_USAGE


def test_train_writes_checkpoint(tmp_path, capsys):
    out = tmp_path / "train"
    code = main(
        ["train", "--preset", "logistic", "--set", "sampling.steps=60", "--set", "train.folds=2",
         "--set", "sigmas=0", "--epochs", "5", "--out", str(out)]
    )
    assert code == EXIT_OK
    cfg, params, _ = load_checkpoint(out / "checkpoint.json")
    assert param_count(cfg) == 13
    header, rows = read_csv(out / "training_log.csv")
    assert header[:3] == ["epoch", "train_mae", "val_mae"]
    assert len(rows) == 6
    assert (out / "best.csv").exists()
    assert "val MAE" in capsys.readouterr().out


def test_bad_config_key_exits_2(tmp_path):
    code = main(["train", "--preset", "logistic", "--set", "train.bogus=1", "--out", str(tmp_path)])
    assert code == EXIT_USAGE


def test_malformed_override_exits_2(tmp_path):
    code = main(["train", "--preset", "logistic", "--set", "novalue", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
