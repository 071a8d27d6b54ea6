import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.kernels import KernelSpec  # noqa: E402
from src.model import FitOptions, fit_map  # noqa: E402
from src.synth import sample_observations, sample_survival, apply_censoring  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["linear", "poly2", "se"])
def spec(request):
    if request.param == "se":
        return KernelSpec("se", sigma=1.3, lengthscale=0.7, noise_var=0.4)
    return KernelSpec(request.param, noise_var=0.4)


def make_cohort(n=20, q=2, d=5, noise_var=0.05, seed=7, censor_frac=0.2, kernel="linear"):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, q))
    spec = KernelSpec(kernel, noise_var=noise_var)
    Y = sample_observations(X, spec, d, rng)
    b = np.linspace(1.0, -0.5, q)
    records = apply_censoring(sample_survival(X, b, 3.0, 4.0, rng), censor_frac, rng)
    return X, [Y], records, spec


@pytest.fixture(scope="session")
def small_fit():
    _, Y_set, records, spec = make_cohort()
    return fit_map(Y_set, records, 2, [spec], opts=FitOptions(seed=3))
