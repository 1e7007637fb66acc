import math

import numpy as np
import pytest

from mapid.evaluation import (
    ZeroDenominatorError,
    clean_rrmse,
    default_start,
    evaluate_expression,
    export_portrait,
    model_trajectory,
    rrmse,
    shadow,
    true_rrmse,
)
from mapid.expr import ExprSystem, parse
from mapid.maps import Dataset, External, NoiseConfig, add_noise


def _system(text: str) -> ExprSystem:
    return ExprSystem((parse(text),))


def test_exact_model_scores_zero(logistic, logistic_data):
    assert rrmse(logistic.as_system(), logistic_data) == pytest.approx(0.0, abs=1e-12)
    assert true_rrmse(logistic, logistic_data) == pytest.approx(0.0, abs=1e-12)


def test_rrmse_known_value():
    X = np.array([[1.0], [2.0]])
    ds = Dataset(inputs=X, targets=X.copy(), sampling=External(source="inline"))
    # residuals 1, 2 against targets 1, 2
    assert rrmse(_system("2*x0"), ds) == pytest.approx(1.0)
    assert rrmse(_system("1.5*x0"), ds) == pytest.approx(0.5)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_rrmse_is_scale_free(logistic_data, scale):
    model = "3.7*x0 - 3.7*x0^2 + 0.01"
    scaled = Dataset(
        inputs=logistic_data.inputs,
        targets=scale * logistic_data.targets,
        sampling=External(source="inline"),
    )
    base = rrmse(_system(model), logistic_data)
    assert rrmse(_system(f"{scale!r}*({model})"), scaled) == pytest.approx(base, rel=1e-12)


def test_rrmse_with_mask(logistic, logistic_data):
    mask = np.zeros(logistic_data.M, dtype=bool)
    mask[:10] = True
    assert rrmse(logistic.as_system(), logistic_data, mask) == pytest.approx(0.0, abs=1e-12)


def test_rrmse_of_failing_expression_is_infinite():
    X = np.array([[0.0], [1.0]])
    ds = Dataset(inputs=X, targets=X + 1.0, sampling=External(source="inline"))
    assert rrmse(_system("|x0|^-1"), ds) == math.inf


def test_rrmse_rejects_zero_targets():
    X = np.array([[1.0], [2.0]])
    ds = Dataset(inputs=X, targets=np.zeros_like(X), sampling=External(source="inline"))
    with pytest.raises(ZeroDenominatorError):
        rrmse(_system("x0"), ds)


def test_clean_rrmse_ignores_noise(logistic, logistic_data):
    noisy = add_noise(logistic_data, NoiseConfig(sigma=0.05, seed=1))
    assert clean_rrmse(logistic.as_system(), logistic, noisy) == pytest.approx(0.0, abs=1e-12)
    assert true_rrmse(logistic, noisy) > 0.01


def test_exact_model_shadows_every_step(logistic):
    result = shadow(logistic.as_system(), logistic, [0.5], 30)
    assert result.shadow_steps == 30
    assert not result.escaped


def test_perturbed_model_separates(logistic):
    # states 0.975 vs 0.95 at step 1, then 0.095 vs 0.18 at step 2
    result = shadow(_system("3.8*x0 - 3.8*x0^2"), logistic, [0.5], 30)
    assert result.shadow_steps == 1
    assert not result.escaped


def test_shadow_shrinks_with_the_gap(logistic):
    model = _system("3.99*x0 - 3.99*x0^2")
    gaps = (0.5, 0.1, 0.02, 1e-3, 1e-6)
    steps = [shadow(model, logistic, [0.3], 60, gap=g).shadow_steps for g in gaps]
    assert all(a >= b for a, b in zip(steps, steps[1:])), steps


def test_escaping_model_is_reported(logistic):
    result = shadow(_system("4*x0"), logistic, [0.5], 30)
    assert result.escaped
    assert result.shadow_steps == 0


def test_shadow_argument_checks(logistic):
    with pytest.raises(ValueError):
        shadow(logistic.as_system(), logistic, [0.5], 0)
    with pytest.raises(ValueError):
        shadow(logistic.as_system(), logistic, [0.5], 10, gap=0.0)


def test_model_trajectory_stops_at_escape():
    traj, escaped = model_trajectory(_system("4*x0"), [0.5], 30)
    assert escaped
    assert len(traj) < 31
    assert traj[0, 0] == 0.5


def test_gaussian_portrait_peaks_at_origin(gaussian):
    portrait = export_portrait(gaussian.as_system(), gaussian, [(-1.0, 1.0)], 101)
    assert portrait.header == ("x0", "output", "true_f", "expr_f", "eval_failed")
    assert portrait.rows.shape == (101, 5)
    true_f = portrait.rows[:, 2]
    assert true_f.max() == pytest.approx(0.5)
    assert portrait.rows[np.argmax(true_f), 0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(portrait.rows[:, 3], true_f)


def test_portrait_marks_failed_points(gaussian):
    portrait = export_portrait(_system("|x0|^-1"), gaussian, [(-1.0, 1.0)], 3)
    failed = portrait.rows[:, 4] == 1.0
    assert failed.sum() == 1
    assert portrait.rows[failed, 0][0] == 0.0
    assert np.isnan(portrait.rows[failed, 3][0])


def test_two_dimensional_portrait(tinkerbell):
    portrait = export_portrait(
        tinkerbell.as_system(), tinkerbell, [(-1.4, 0.6), (-1.7, 0.7)], 5
    )
    assert portrait.header[:3] == ("x0", "x1", "output")
    assert portrait.rows.shape == (50, 6)
    assert set(portrait.rows[:, 2]) == {0.0, 1.0}


def test_portrait_rejects_wrong_domain(tinkerbell):
    with pytest.raises(ValueError):
        export_portrait(tinkerbell.as_system(), tinkerbell, [(-1.0, 1.0)], 5)


def test_default_start(logistic_data, gaussian_wide_data):
    assert default_start(logistic_data).tolist() == [0.5]
    assert default_start(gaussian_wide_data).tolist() == [-1.0]


def test_evaluate_without_map(logistic, logistic_data):
    report = evaluate_expression(logistic.as_system(), logistic_data)
    assert report.true_rrmse is None
    assert report.shadow_steps is None
    assert report.rrmse == pytest.approx(0.0, abs=1e-12)


def test_evaluate_with_map(logistic, logistic_data):
    expr = _system("3.874*x0 - 3.8735*|x0|^2.0094")
    report = evaluate_expression(expr, logistic_data, logistic, val_mae=0.01, steps=30)
    assert report.rrmse < 0.01
    assert report.true_rrmse == pytest.approx(0.0, abs=1e-12)
    assert 0 <= report.shadow_steps <= 30
    assert report.escaped is False
    assert report.val_mae == 0.01
