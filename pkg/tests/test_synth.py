import numpy as np
import pytest
from scipy import stats

from src.errors import InputError
from src.experiments import preset_config
from src.kernels import KernelSpec, kernel_matrix
from src.synth import (
    PatternSpec,
    SimulationConfig,
    SourceDesign,
    apply_censoring,
    censor_count,
    make_pattern,
    misalignment_errors,
    pattern_assignment,
    sample_observations,
    sample_survival,
    simulate,
)


def _rotation(angle):
    return np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


def test_pattern_layout():
    X = make_pattern()
    assert X.shape == (96, 2)
    assignment = pattern_assignment()
    assert [c.kind for c in assignment.components] == ["circle", "circle", "line", "line"]
    outer = X[assignment.components[0].index]
    assert np.allclose(np.linalg.norm(outer, axis=1), 2.0)


def test_reference_pattern_has_no_error():
    assignment = pattern_assignment()
    errors = misalignment_errors(assignment.reference, assignment)
    assert max(errors) < 1e-10


def test_errors_invariant_to_rotation_reflection_and_scale():
    rng = np.random.default_rng(0)
    assignment = pattern_assignment()
    noisy = assignment.reference + 0.05 * rng.standard_normal(assignment.reference.shape)
    base = misalignment_errors(noisy, assignment)
    reflect = np.diag([1.0, -1.0])
    for transform in (_rotation(0.7) * 3.0, reflect @ _rotation(-1.9) * 0.4):
        moved = misalignment_errors(noisy @ transform.T, assignment)
        assert np.allclose(moved, base, rtol=1e-8, atol=1e-12)
    assert all(e > 0 for e in base)


def test_errors_reject_bad_shapes():
    assignment = pattern_assignment()
    with pytest.raises(InputError):
        misalignment_errors(np.zeros((96, 3)), assignment)
    with pytest.raises(InputError):
        misalignment_errors(np.zeros((95, 2)), assignment)
    with pytest.raises(InputError):
        PatternSpec(outer_count=2)


def test_censor_count_rounding():
    assert censor_count(0.1, 96) == 10
    assert censor_count(0.25, 10) == 3
    assert censor_count(0.0, 50) == 0


def test_apply_censoring():
    rng = np.random.default_rng(1)
    times = rng.uniform(1, 5, size=40)
    data = apply_censoring(times, 0.25, rng)
    censored = data.events == 0
    assert censored.sum() == 10
    assert np.all(data.times[censored] < times[censored])
    assert np.all(data.times[~censored] == times[~censored])
    with pytest.raises(InputError):
        apply_censoring(times, 1.0, rng)


def test_event_time_sampler_distribution():
    rng = np.random.default_rng(2024)
    x = np.array([[0.3, -0.8]])
    b, rho, nu = np.array([1.0, -0.5]), 10.0, 10.0
    score = float(x @ b)
    times = sample_survival(np.repeat(x, 10_000, axis=0), b, rho, nu, rng)
    cdf = lambda t: 1 - np.exp(-((t / rho) ** nu) * np.exp(score))  # noqa: E731
    assert stats.kstest(times, cdf).pvalue > 0.01


def test_sampler_inverts_cdf():
    X = np.array([[0.0], [1.0]])
    z = np.array([0.5, 0.5])
    times = sample_survival(X, [1.0], 2.0, 3.0, None, z=z)
    survival = np.exp(-((times / 2.0) ** 3) * np.exp(X[:, 0]))
    assert np.allclose(survival, 0.5)


def test_observation_covariance_matches_kernel():
    X = np.array([[0.5, 1.0], [1.2, 0.3], [0.8, 0.8], [0.2, 1.5]])
    spec = KernelSpec("linear", noise_var=0.1)
    Y = sample_observations(X, spec, 100_000, np.random.default_rng(0))
    K = kernel_matrix(X, spec).K
    assert np.allclose(Y @ Y.T / Y.shape[1], K, rtol=0.05, atol=0)


def test_noise_only_limit():
    spec = KernelSpec("se", sigma=1e-12, noise_var=0.3)
    X = np.random.default_rng(1).normal(size=(5, 2))
    Y = sample_observations(X, spec, 20_000, np.random.default_rng(2))
    assert np.var(Y, axis=1) == pytest.approx(np.full(5, 0.3), rel=0.05)
    again = sample_observations(X, spec, 20_000, np.random.default_rng(2))
    assert np.array_equal(Y, again)


def test_simulate_is_deterministic():
    a = simulate(preset_config("retrieval", seed=4))
    b = simulate(preset_config("retrieval", seed=4))
    c = simulate(preset_config("retrieval", seed=5))
    assert np.array_equal(a.Y_set[0], b.Y_set[0])
    assert np.array_equal(a.records.times, b.records.times)
    assert not np.array_equal(a.Y_set[0], c.Y_set[0])
    assert a.Y_set[0].shape == (96, 10)
    assert int(np.sum(a.records.events == 0)) == 10


def test_simulation_layouts():
    config = SimulationConfig(sources=(SourceDesign(3, KernelSpec("se", noise_var=0.01)),), latent="uniform",
                              n=30, q=1, b=(-1.0,))
    bundle = simulate(config)
    assert bundle.X_true.shape == (30, 1)
    assert np.all(np.abs(bundle.X_true) <= 2.0)
    assert bundle.assignment is None
    with pytest.raises(InputError):
        SimulationConfig(latent="spiral")
    with pytest.raises(InputError):
        SimulationConfig(latent="gaussian", q=3)
    with pytest.raises(InputError):
        preset_config("nope")
