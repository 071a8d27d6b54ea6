from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, special, stats
from scipy.linalg import subspace_angles

from src.errors import InputError, NumericalError
from src.kernels import KernelSpec, gplvm_nll
from src.model import (
    FitOptions,
    HyperOptions,
    JointObjective,
    LatentState,
    assemble_hessian,
    fit_map,
    free_parameter_count,
    hessian_logdet,
    joint_grad,
    joint_nll,
    laplace_hyp_nll,
    optimize_hyperparameters,
    pin_mask_for,
    scan_dimensionality,
)
import src.model as model
from src.optimize import finite_diff_check, finite_diff_jacobian, minimize, relative_error
from src.synth import sample_observations, sample_survival
from src.wphm import PriorConfig, SurvivalData, WphmParams, wphm_nll

from conftest import make_cohort


def _objective(spec, rng, n=6, q=2, d=3):
    _, Y_set, records, _ = make_cohort(n=n, q=q, d=d, seed=int(rng.integers(1_000_000)))
    objective = JointObjective(Y_set, records, [spec], PriorConfig(), pin_mask_for(n, q))
    latent = LatentState(rng.normal(scale=0.7, size=(n, q)))
    params = WphmParams(rng.normal(scale=0.5, size=q), rho=rng.uniform(1.5, 4.0), nu=rng.uniform(1.5, 4.0))
    return objective, objective.pack(latent, params)


def test_pin_mask_layout():
    expected = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0], [0, 0, 0]], dtype=bool)
    assert np.array_equal(pin_mask_for(4, 3), expected)
    assert free_parameter_count(96, 2) == 195
    assert free_parameter_count(96, 2, use_survival=False) == 191


def test_latent_state_pinning_and_signs(rng):
    latent = LatentState(rng.standard_normal((5, 3)))
    assert np.all(latent.X[latent.pin_mask] == 0.0)
    assert np.array_equal(latent.with_free(latent.free_values()).X, latent.X)
    b = rng.standard_normal(3)
    fixed, b_fixed = latent.fix_signs(b)
    assert np.all(np.diag(fixed.X) >= 0)
    assert np.allclose(fixed.X @ b_fixed, latent.X @ b)


def test_single_individual_fit_is_pinned():
    rng = np.random.default_rng(4)
    Y = rng.standard_normal((1, 5))
    spec = KernelSpec("linear", noise_var=0.01**2)
    fit = fit_map([Y], None, 2, [spec], opts=FitOptions(use_survival=False))
    assert fit.free_param_count == 1
    assert fit.X[0, 1] == 0.0
    assert fit.X[0, 0] >= 0.0
    # the optimum sits on the circle |x|^2 = y.y / d - noise
    assert fit.X[0, 0] ** 2 == pytest.approx(float(Y @ Y.T) / 5 - spec.noise_var, rel=1e-4)


def test_joint_gradient(rng, spec):
    for _ in range(10):
        objective, theta = _objective(spec, rng)
        assert finite_diff_check(objective.value_and_grad, theta) < 1e-5


def test_joint_hessian(rng, spec):
    for _ in range(3):
        objective, theta = _objective(spec, rng, n=5)
        H = objective.hessian(theta)
        numeric = finite_diff_jacobian(lambda t: objective.value_and_grad(t)[1], theta, step=1e-5)
        assert H.shape == (objective.size, objective.size)
        assert relative_error(H, numeric) < 1e-4


def test_joint_nll_is_sum_of_terms(rng):
    X, Y_set, records, spec = make_cohort(n=8, d=3)
    latent = LatentState(X)
    params = WphmParams(np.array([0.4, -0.2]), 2.0, 3.0)
    total = joint_nll(Y_set, records, latent, params, [spec])
    assert total == pytest.approx(gplvm_nll(Y_set, latent.X, [spec]) + wphm_nll(records, latent.X, params), rel=1e-12)
    assert joint_nll(Y_set, records, latent, None, [spec]) == pytest.approx(gplvm_nll(Y_set, latent.X, [spec]))

    se = KernelSpec("se", noise_var=0.2)
    prior = -np.sum(stats.norm.logpdf(latent.X, scale=2.0)) / 8
    expected = gplvm_nll(Y_set, latent.X, [se]) + wphm_nll(records, latent.X, params) + prior
    assert joint_nll(Y_set, records, latent, params, [se]) == pytest.approx(expected, rel=1e-12)


def test_joint_nll_invariant_to_rotating_latents_and_coefficients(rng):
    X, Y_set, records, spec = make_cohort(n=8, q=3, d=5)
    unpinned = np.zeros(X.shape, dtype=bool)
    params = WphmParams(np.array([0.6, -0.3, 0.2]), 2.5, 3.0)
    base = joint_nll(Y_set, records, LatentState(X, unpinned), params, [spec])
    for _ in range(5):
        U = stats.ortho_group.rvs(3, random_state=rng)
        rotated = WphmParams(U.T @ params.b, params.rho, params.nu)
        value = joint_nll(Y_set, records, LatentState(X @ U, unpinned), rotated, [spec])
        assert value == pytest.approx(base, rel=1e-10)


def test_joint_grad_zeroes_pinned_entries(rng):
    X, Y_set, records, spec = make_cohort(n=8, q=3, d=4)
    g_x, g_params = joint_grad(Y_set, records, LatentState(X), WphmParams.initial(3), [spec])
    assert g_x.shape == (8, 3) and g_params.shape == (5,)
    assert g_x[0, 1] == 0.0 and g_x[0, 2] == 0.0 and g_x[1, 2] == 0.0


def test_hessian_logdet_rejects_indefinite():
    with pytest.raises(NumericalError):
        hessian_logdet(-np.eye(3), 10)
    assert hessian_logdet(np.eye(3), 2) == pytest.approx(3 * np.log(2))


def test_fit_map_result(small_fit):
    fit = small_fit
    assert fit.converged
    assert np.isfinite(fit.hyp_nll)
    assert fit.free_param_count == free_parameter_count(20, 2)
    assert fit.X[0, 1] == 0.0
    assert fit.X[0, 0] >= 0 and fit.X[1, 1] >= 0
    assert laplace_hyp_nll(fit) == pytest.approx(fit.hyp_nll, rel=1e-10)
    assert fit.nll == pytest.approx(joint_nll(fit.Y_set, fit.survival, fit.latent, fit.wphm, fit.specs), rel=1e-12)


def test_natural_hessian_at_optimum(small_fit):
    fit = small_fit
    H = assemble_hessian(fit.Y_set, fit.survival, fit.latent, fit.wphm, fit.specs)
    H_nat = assemble_hessian(fit.Y_set, fit.survival, fit.latent, fit.wphm, fit.specs, natural=True)
    d1, _ = fit.wphm.chain_factors()
    J = np.concatenate([np.ones(H.shape[0] - 2), d1])
    assert np.allclose(H, H_nat * np.outer(J, J), atol=1e-4)


def test_fit_map_is_deterministic():
    _, Y_set, records, spec = make_cohort(n=12, d=4)
    a = fit_map(Y_set, records, 2, [spec], opts=FitOptions(seed=5))
    b = fit_map(Y_set, records, 2, [spec], opts=FitOptions(seed=5))
    assert np.array_equal(a.X, b.X)
    assert a.nll == b.nll


def test_fit_without_survival():
    _, Y_set, _, spec = make_cohort(n=12, d=4)
    fit = fit_map(Y_set, None, 2, [spec], opts=FitOptions(use_survival=False))
    assert fit.wphm is None and not fit.use_survival
    assert fit.free_param_count == 12 * 2 - 1
    assert np.all(fit.risk_scores() == 0.0)


def test_outer_round_ascent_is_recorded(monkeypatch):
    _, Y_set, _, spec = make_cohort(n=10, d=4)
    calls = []

    def rising(objective, x0, opts):
        res = minimize(objective, x0, opts)
        calls.append(res.value)
        # the second outer round reports a worse value than the first
        return replace(res, value=res.value + 1.0) if len(calls) == 2 else res

    monkeypatch.setattr(model, "minimize", rising)
    fit = fit_map(Y_set, None, 2, [spec], opts=FitOptions(use_survival=False, restarts=1))
    assert fit.ascent_rounds == [2]
    assert not fit.converged
    assert fit.nll_trace[2] > fit.nll_trace[1]


def test_converged_fit_has_no_ascent(small_fit):
    assert small_fit.ascent_rounds == []


def test_fit_rejects_bad_dimension():
    _, Y_set, records, spec = make_cohort(n=10, d=4)
    with pytest.raises(InputError):
        fit_map(Y_set, records, 0, [spec])


def test_linear_gplvm_spans_principal_subspace():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((2, 6)) * np.array([[3.0], [2.0]])
        Y = rng.standard_normal((20, 2)) @ W + 0.05 * rng.standard_normal((20, 6))
        fit = fit_map([Y], None, 2, [KernelSpec("linear", noise_var=0.05)],
                      opts=FitOptions(use_survival=False, seed=seed))
        U = np.linalg.svd(Y, full_matrices=False)[0][:, :2]
        assert np.max(subspace_angles(fit.X, U)) < 1e-3


def test_optimize_hyperparameters_improves_evidence():
    _, Y_set, records, spec = make_cohort(n=15, d=4, noise_var=0.3)
    start = spec.replace(noise_var=2.0)
    fixed = fit_map(Y_set, records, 2, [start])
    result = optimize_hyperparameters(Y_set, records, 2, [start], hyper=HyperOptions(max_evaluations=25))
    specs, fit = result
    assert specs[0].noise_var != 2.0
    assert fit.hyp_nll < fixed.hyp_nll
    assert result.evaluations >= 1 and len(result.trace) >= 1


def test_scan_table():
    _, Y_set, records, spec = make_cohort(n=15, d=4)
    result = scan_dimensionality(Y_set, records, [3, 1, 2], [spec], kernels=["linear", "poly2"],
                                 hyper=HyperOptions(optimize=False))
    frame = result.to_frame()
    assert list(frame.kernel) == ["linear"] * 3 + ["poly2"] * 3
    assert list(frame.q) == [1, 2, 3, 1, 2, 3]
    for kernel, q_star in result.q_star.items():
        best = frame[(frame.kernel == kernel) & (frame.q == q_star)]
        assert best.ratio_to_best.iloc[0] == pytest.approx(1.0)
    single = scan_dimensionality(Y_set, records, [2], [spec], hyper=HyperOptions(optimize=False))
    assert len(single.rows) == 1 and single.q_star == {"linear": 2}
    with pytest.raises(InputError):
        scan_dimensionality(Y_set, records, [1, 4], [spec])


@pytest.mark.slow
def test_laplace_matches_quadrature():
    spec = KernelSpec("se", sigma=1.0, lengthscale=1.0, noise_var=0.1)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X_true = np.array([[0.5], [-0.5]])
        Y = sample_observations(X_true, spec, 40, rng)
        fit = fit_map([Y], None, 1, [spec], opts=FitOptions(use_survival=False, seed=seed))
        assert fit.converged

        def integrand(u, v):
            # u = x1 + x2, v = x1 - x2
            X = np.array([[(u + v) / 2], [(u - v) / 2]])
            return np.exp(-2 * (joint_nll([Y], None, LatentState(X), None, [spec]) - fit.nll))

        u0 = float(fit.X[0, 0] + fit.X[1, 0])
        v0 = abs(float(fit.X[0, 0] - fit.X[1, 0]))
        inner = lambda v: integrate.quad(integrand, -30, 30, args=(v,), points=[u0], limit=200, epsrel=1e-8)[0]  # noqa: E731
        # du dv = 2 dx1 dx2, and x -> -x maps the v > 0 half onto v < 0; the pinned half-space x1 >= 0 holds half the mass
        total, _ = integrate.quad(inner, 0.0, 8.0, points=[v0], limit=200, epsrel=1e-8)
        half_space = 0.5 * total
        exact = fit.nll - np.log(half_space) / 2
        assert fit.hyp_nll == pytest.approx(exact, rel=0.05)


@pytest.mark.slow
def test_laplace_matches_integral_with_survival_block():
    # N=2, q=1, d=2: integrate the posterior over (x1, x2, b, rho, nu) by importance sampling
    spec = KernelSpec("se", sigma=1.0, lengthscale=1.0, noise_var=0.1)
    X_true = np.array([[0.8], [-0.8]])
    checked = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        Y = sample_observations(X_true, spec, 2, rng)
        records = SurvivalData(sample_survival(X_true, [1.0], 3.0, 2.0, rng), [1, 1])
        fit = fit_map([Y], records, 1, [spec], opts=FitOptions(seed=seed))
        if not fit.converged:
            continue
        H = assemble_hessian(fit.Y_set, fit.survival, fit.latent, fit.wphm, fit.specs, natural=True)
        cov = np.linalg.inv(fit.n * H)
        # the pinned half-space x1 >= 0 must not cut into the bulk of the posterior
        if fit.X[0, 0] < 3 * np.sqrt(cov[0, 0]):
            continue

        mode = np.array([fit.X[0, 0], fit.X[1, 0], fit.wphm.b[0], fit.wphm.rho, fit.wphm.nu])
        proposal = stats.multivariate_t(loc=mode, shape=3.0 * cov, df=3, seed=seed)
        draws = proposal.rvs(size=40_000)
        log_q = proposal.logpdf(draws)
        log_w = np.full(len(draws), -np.inf)
        inside = (draws[:, 0] >= 0) & (draws[:, 3] > 1.0) & (draws[:, 4] > 1.0)
        for k in np.flatnonzero(inside):
            x1, x2, b, rho, nu = draws[k]
            value = joint_nll([Y], records, LatentState([[x1], [x2]]), WphmParams([b], rho, nu), [spec])
            log_w[k] = -fit.n * (value - fit.nll) - log_q[k]
        log_mass = special.logsumexp(log_w) - np.log(len(draws))
        exact = fit.nll - log_mass / fit.n
        assert fit.hyp_nll == pytest.approx(exact, rel=0.05)
        checked += 1
        if checked == 5:
            break
    assert checked == 5
