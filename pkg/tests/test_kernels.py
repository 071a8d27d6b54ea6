import numpy as np
import pytest
from scipy import stats

from src.errors import InputError
from src.kernels import (
    KernelFamily,
    KernelSpec,
    gplvm_hessian_xx,
    gplvm_nll,
    gplvm_value_and_grad,
    kernel_gradient_pattern,
    kernel_matrix,
)
from src.optimize import finite_diff_check, finite_diff_gradient, finite_diff_jacobian, relative_error


def _data(rng, n=6, q=2, d=4, sources=1):
    X = rng.normal(scale=0.8, size=(n, q))
    return X, [rng.standard_normal((n, d)) for _ in range(sources)]


def test_kernel_spec_validation():
    with pytest.raises(InputError):
        KernelSpec("linear", noise_var=0.0)
    with pytest.raises(InputError):
        KernelSpec("se", lengthscale=-1.0)
    with pytest.raises(InputError):
        KernelSpec("cubic")


def test_kernel_family_aliases():
    assert KernelFamily.parse("RBF") is KernelFamily.SE
    assert KernelFamily.parse("polynomial") is KernelFamily.POLY2
    assert KernelSpec("linear").fixed_sigma
    assert not KernelSpec("se").fixed_sigma


def test_kernel_matrix_properties(rng, spec):
    X, _ = _data(rng)
    km = kernel_matrix(X, spec)
    assert np.allclose(km.K, km.K.T)
    assert np.all(np.diag(km.K) >= spec.noise_var)
    sign, logdet = np.linalg.slogdet(km.K)
    assert sign > 0
    assert km.logdet == pytest.approx(logdet, rel=1e-10)
    assert np.allclose(km.K @ km.inverse, np.eye(len(X)), atol=1e-9)


def test_squared_exponential_values():
    X = np.array([[0.0], [2.0]])
    km = kernel_matrix(X, KernelSpec("se", sigma=1.5, lengthscale=0.5, noise_var=0.1))
    assert km.K[0, 1] == pytest.approx(1.5 * np.exp(-0.5 * 0.5 * 4.0))
    assert km.K[0, 0] == pytest.approx(1.6)


def test_polynomial_values():
    X = np.array([[1.0, 2.0], [0.5, -1.0]])
    km = kernel_matrix(X, KernelSpec("poly2", noise_var=0.2))
    assert km.K[0, 1] == pytest.approx((1 + 0.5 - 2.0) ** 2)
    assert km.K[0, 0] == pytest.approx((1 + 5.0) ** 2 + 0.2)


def test_gradient_matches_finite_differences(rng, spec):
    for _ in range(10):
        X, Y_set = _data(rng)
        specs = [spec]

        def objective(x):
            value, grad = gplvm_value_and_grad(Y_set, x.reshape(X.shape), specs)
            return value, grad.ravel()

        assert finite_diff_check(objective, X.ravel()) < 1e-5


def test_multi_source_value_is_sum(rng):
    X, Y_set = _data(rng, sources=2)
    specs = [KernelSpec("linear", noise_var=0.3), KernelSpec("se", noise_var=0.2)]
    total = gplvm_nll(Y_set, X, specs)
    parts = gplvm_nll(Y_set[:1], X, specs[:1]) + gplvm_nll(Y_set[1:], X, specs[1:])
    assert total == pytest.approx(parts, rel=1e-12)


def test_nll_invariant_to_rotating_latents(rng, spec):
    X, Y_set = _data(rng, q=3)
    U = stats.ortho_group.rvs(3, random_state=rng)
    assert gplvm_nll(Y_set, X @ U, [spec]) == pytest.approx(gplvm_nll(Y_set, X, [spec]), rel=1e-10)


def test_hessian_matches_gradient_differences(rng, spec):
    for _ in range(5):
        X, Y_set = _data(rng, n=5, q=2, d=3)
        specs = [spec]
        H = gplvm_hessian_xx(Y_set, X, specs)
        numeric = finite_diff_jacobian(lambda x: gplvm_value_and_grad(Y_set, x.reshape(X.shape), specs)[1], X.ravel(),
                                       step=1e-5)
        assert np.allclose(H, H.T)
        assert relative_error(H, numeric) < 1e-4


def test_hessian_drops_pinned_coordinates(rng):
    X, Y_set = _data(rng, n=4, q=2)
    mask = np.zeros(X.shape, dtype=bool)
    mask[0, 1] = True
    specs = [KernelSpec("linear", noise_var=0.3)]
    assert gplvm_hessian_xx(Y_set, X, specs, pin_mask=mask).shape == (7, 7)
    grad = gplvm_value_and_grad(Y_set, X, specs, pin_mask=mask)[1]
    assert grad[0, 1] == 0.0


def test_gradient_sparsity_pattern(rng, spec):
    X, _ = _data(rng, n=5, q=2)
    pattern = kernel_gradient_pattern(X, spec)
    for r in range(len(X)):
        for mu in range(X.shape[1]):
            def entry(v, i, j):
                Z = X.copy()
                Z[r, mu] = v[0]
                return kernel_matrix(Z, spec).K[i, j]

            dense = pattern.dense(r, mu)
            for i in range(len(X)):
                for j in range(len(X)):
                    numeric = finite_diff_gradient(lambda v: entry(v, i, j), np.array([X[r, mu]]))[0]
                    assert dense[i, j] == pytest.approx(numeric, abs=1e-6)
                    if r not in (i, j):
                        assert dense[i, j] == 0.0


def test_source_shape_mismatch_raises(rng):
    X, Y_set = _data(rng)
    with pytest.raises(InputError):
        gplvm_nll([Y_set[0][:-1]], X, [KernelSpec()])
    with pytest.raises(InputError):
        gplvm_nll(Y_set, X, [KernelSpec(), KernelSpec()])
