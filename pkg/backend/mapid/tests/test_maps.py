import numpy as np
import pytest
from pydantic import TypeAdapter, ValidationError

from mapid.maps import (
    CustomMap,
    DimensionMismatchError,
    GaussianMap,
    LinSpace,
    LogisticMap,
    MapSpec,
    NoiseConfig,
    TinkerbellMap,
    Trajectory,
    TrajectoryEscapedError,
    add_noise,
    assign_folds,
    generate_trajectory,
    sample_linspace,
    step,
    trajectory_dataset,
)


def test_logistic_step(logistic):
    assert step(logistic, [0.5])[0] == pytest.approx(0.975)
    assert step(logistic, 0.5)[0] == pytest.approx(0.975), "Scalars are accepted for 1-D maps"


def test_gaussian_step(gaussian):
    assert step(gaussian, [0.0])[0] == pytest.approx(0.5)


def test_tinkerbell_step(tinkerbell):
    x, y = -0.5, -0.5
    expected = (x * x - y * y + 0.9 * x - 0.6013 * y, 2 * x * y + 2.0 * x + 0.5 * y)
    assert step(tinkerbell, [x, y]) == pytest.approx(expected)


def test_step_rejects_wrong_dimension(tinkerbell):
    with pytest.raises(DimensionMismatchError):
        step(tinkerbell, [0.1])


def test_trajectory_shape_and_start(logistic):
    traj = generate_trajectory(logistic, [0.5], 1000)
    assert traj.shape == (1001, 1)
    assert traj[0, 0] == 0.5
    assert np.all((traj > 0) & (traj < 1)), "Logistic orbit stays inside the unit interval"


def test_trajectory_is_deterministic(tinkerbell):
    a = generate_trajectory(tinkerbell, [-0.5, -0.5], 100)
    b = generate_trajectory(tinkerbell, [-0.5, -0.5], 100)
    assert np.array_equal(a, b)


def test_repeated_step_matches_trajectory(tinkerbell):
    traj = generate_trajectory(tinkerbell, [-0.5, -0.5], 50)
    state = np.array([-0.5, -0.5])
    for t in range(1, 51):
        state = step(tinkerbell, state)
        assert np.array_equal(state, traj[t]), f"step {t}"


def test_trajectory_rejects_zero_steps(logistic):
    with pytest.raises(ValueError):
        generate_trajectory(logistic, [0.5], 0)


def test_escaping_trajectory_reports_step():
    spec = LogisticMap(r=5.0)
    with pytest.raises(TrajectoryEscapedError) as info:
        generate_trajectory(spec, [2.0], 50)
    assert info.value.step >= 1
    assert info.value.trajectory.shape[0] == info.value.step
    assert np.all(np.abs(info.value.trajectory) <= 1e6)


def test_trajectory_dataset_pairs_are_consecutive(logistic):
    ds = trajectory_dataset(logistic, [0.5], 50)
    assert ds.M == 50
    assert np.array_equal(ds.inputs[1:], ds.targets[:-1])
    assert isinstance(ds.sampling, Trajectory)


def test_linspace_includes_endpoints(gaussian):
    ds = sample_linspace(gaussian, -1.0, 1.0, 1000)
    assert ds.M == 1000
    assert ds.inputs[0, 0] == -1.0 and ds.inputs[-1, 0] == 1.0
    assert np.allclose(ds.targets, gaussian.apply(ds.inputs))
    assert isinstance(ds.sampling, LinSpace)


def test_linspace_rejects_bad_ranges(gaussian, tinkerbell):
    with pytest.raises(ValueError):
        sample_linspace(gaussian, 1.0, -1.0, 10)
    with pytest.raises(ValueError):
        sample_linspace(gaussian, -1.0, 1.0, 1)
    with pytest.raises(ValueError):
        sample_linspace(tinkerbell, -1.0, 1.0, 10)


def test_zero_noise_is_identity(logistic_data):
    noisy = add_noise(logistic_data, NoiseConfig(sigma=0.0, seed=3))
    assert np.array_equal(noisy.inputs, logistic_data.inputs)
    assert np.array_equal(noisy.targets, logistic_data.targets)


def test_trajectory_noise_perturbs_state_stream_once(logistic_data):
    noisy = add_noise(logistic_data, NoiseConfig(sigma=0.01, seed=3))
    assert np.array_equal(noisy.inputs[1:], noisy.targets[:-1]), "Noisy target is next noisy input"
    assert np.array_equal(noisy.clean_inputs, logistic_data.inputs)
    assert not np.array_equal(noisy.inputs, logistic_data.inputs)


def test_noise_scales_with_rms(tinkerbell):
    sigma = 0.05
    ds = trajectory_dataset(tinkerbell, [-0.5, -0.5], 10_000)
    noisy = add_noise(ds, NoiseConfig(sigma=sigma, seed=11))
    residual = noisy.inputs - ds.inputs
    expected = sigma * ds.rms()
    assert np.std(residual, axis=0) == pytest.approx(expected, rel=0.05)


def test_noise_is_seeded(logistic_data):
    a = add_noise(logistic_data, NoiseConfig(sigma=0.05, seed=7))
    b = add_noise(logistic_data, NoiseConfig(sigma=0.05, seed=7))
    c = add_noise(logistic_data, NoiseConfig(sigma=0.05, seed=8))
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, c.inputs)


def test_noise_cannot_be_applied_twice(logistic_data):
    noisy = add_noise(logistic_data, NoiseConfig(sigma=0.01, seed=1))
    with pytest.raises(ValueError):
        add_noise(noisy, NoiseConfig(sigma=0.01, seed=2))


def test_dataset_arrays_are_read_only(logistic_data):
    with pytest.raises(ValueError):
        logistic_data.inputs[0, 0] = 1.0


def test_folds_are_balanced_and_seeded(logistic_data):
    ds = assign_folds(logistic_data, 5, seed=4)
    counts = np.bincount(ds.fold_ids, minlength=5)
    assert counts.tolist() == [40] * 5
    again = assign_folds(logistic_data, 5, seed=4)
    assert np.array_equal(ds.fold_ids, again.fold_ids)
    other = assign_folds(logistic_data, 5, seed=5)
    assert not np.array_equal(ds.fold_ids, other.fold_ids)


def test_folds_need_enough_samples(logistic):
    ds = trajectory_dataset(logistic, [0.5], 3)
    with pytest.raises(ValueError):
        assign_folds(ds, 5, seed=0)


def test_exact_systems_match_apply(logistic, gaussian, tinkerbell, rng):
    for spec in (logistic, gaussian, tinkerbell):
        X = rng.uniform(-1.0, 1.0, size=(50, spec.dim))
        assert np.allclose(spec.as_system().evaluate(X), spec.apply(X), rtol=1e-12, atol=1e-12)


def test_custom_map_parses_components():
    spec = CustomMap(exprs=("3.9*x0 - 3.9*x0^2",))
    assert spec.dim == 1
    assert step(spec, [0.5])[0] == pytest.approx(0.975)


def test_custom_map_rejects_out_of_range_variable():
    with pytest.raises(ValidationError):
        CustomMap(exprs=("x1",))


def test_map_spec_discriminates_on_kind():
    spec = TypeAdapter(MapSpec).validate_python({"kind": "tinkerbell", "a": 0.3})
    assert isinstance(spec, TinkerbellMap) and spec.a == 0.3
    with pytest.raises(ValidationError):
        TypeAdapter(MapSpec).validate_python({"kind": "logistic", "alpha": 1.0})


def test_map_parameters_must_be_finite():
    with pytest.raises(ValidationError):
        GaussianMap(alpha=float("inf"))
