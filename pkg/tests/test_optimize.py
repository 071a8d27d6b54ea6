import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from src.errors import InputError, NumericalError
from src.optimize import OptimOptions, finite_diff_check, finite_diff_gradient, minimize, relative_error


def test_minimize_rosenbrock():
    result = minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0, 0.5]), OptimOptions(trace=True))
    assert result.converged
    assert np.allclose(result.x, 1.0, atol=1e-5)
    assert result.grad_norm <= 1e-6
    assert all(a >= b for a, b in zip(result.trace, result.trace[1:]))


def test_minimize_respects_iteration_cap():
    result = minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), OptimOptions(max_iterations=2))
    assert not result.converged
    assert result.iterations <= 2


def test_non_finite_objective_raises():
    with pytest.raises(NumericalError):
        minimize(lambda x: (np.nan, np.zeros_like(x)), np.ones(2))


def test_empty_parameter_vector():
    result = minimize(lambda x: (3.0, x), np.zeros(0))
    assert result.converged and result.value == 3.0


def test_options_validation():
    with pytest.raises(InputError):
        OptimOptions(max_iterations=0)
    with pytest.raises(InputError):
        OptimOptions(gtol=0.0)


def test_finite_differences_on_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    x = np.array([0.4, -1.1])
    assert np.allclose(finite_diff_gradient(lambda z: 0.5 * z @ A @ z, x), A @ x, atol=1e-8)
    assert finite_diff_check(lambda z: (0.5 * z @ A @ z, A @ z), x) < 1e-8
    assert finite_diff_check(lambda z: (0.5 * z @ A @ z, 2 * A @ z), x) > 0.1
    assert relative_error(np.ones(2), np.ones(2)) == 0.0
