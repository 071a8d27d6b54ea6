import logging

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, ldl

from .errors import InputError, NumericalError

logger = logging.getLogger(__name__)

POLY_DEGREE = 2
JITTER = 1e-10
LOG_2PI = np.log(2 * np.pi)


class KernelFamily(str, Enum):
    LINEAR = "linear"
    POLY2 = "poly2"
    SE = "se"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"poly": cls.POLY2, "polynomial": cls.POLY2, "rbf": cls.SE, "squared_exponential": cls.SE}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"Unknown kernel '{value}'. Use one of: {', '.join(f.value for f in cls)}") from None


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters of one observed data source.

    `lengthscale` multiplies the squared latent distance, k = sigma * exp(-l |xi - xj|^2 / 2).
    """
    family: KernelFamily = KernelFamily.LINEAR
    sigma: float = 1.0
    lengthscale: float = 1.0
    noise_var: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        for name in ("sigma", "lengthscale", "noise_var"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise InputError(f"Kernel {name} must be a positive number, got {value}")
            object.__setattr__(self, name, value)

    @property
    def fixed_sigma(self):
        # sigma is redundant with the scale of X for linear and polynomial kernels
        return self.family is not KernelFamily.SE

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class KernelMatrix:
    K: np.ndarray
    chol: tuple
    logdet: float
    jitter: float = 0.0

    def solve(self, B):
        return cho_solve(self.chol, B, check_finite=False)

    @property
    def inverse(self):
        return self.solve(np.eye(len(self.K)))


@dataclass(frozen=True)
class GplvmGradSparsity:
    """Nonzero pattern of dK_ij/dx_rmu, which vanishes unless r is i or j.

    values[r, j, mu] holds dK_rj/dx_rmu; the same numbers fill column r by symmetry.
    """
    values: np.ndarray

    def dense(self, r, mu):
        n = self.values.shape[0]
        dK = np.zeros((n, n))
        dK[r, :] = self.values[r, :, mu]
        dK[:, r] = self.values[r, :, mu]
        return dK


class Kernel(ABC):
    def __init__(self, spec: KernelSpec):
        self.spec = spec

    @classmethod
    def create(cls, spec: KernelSpec):
        if spec.family is KernelFamily.LINEAR:
            return LinearKernel(spec)
        elif spec.family is KernelFamily.POLY2:
            return PolynomialKernel(spec)
        elif spec.family is KernelFamily.SE:
            return SquaredExponentialKernel(spec)
        raise InputError(f"Unsupported kernel family: {spec.family}")

    @abstractmethod
    def cross(self, X1, X2):
        """k(x1_a, x2_j) for all pairs, without the noise term."""

    @abstractmethod
    def diag(self, X):
        pass

    @abstractmethod
    def grad_cross(self, X1, X2):
        """D[a, j, mu] = dk(x1_a, x2_j) / dx1_{a mu}."""

    @abstractmethod
    def grad_diag(self, X):
        """dk(x_a, x_a) / dx_{a mu}."""

    @abstractmethod
    def hess_cross(self, X):
        """C[r, p, mu, eta] = d2 k(x_r, x_p) / dx_{r mu} dx_{p eta}, r != p."""

    @abstractmethod
    def hess_same(self, X):
        """S[r, j, mu, eta] = d2 k(x_r, x_j) / dx_{r mu} dx_{r eta}, j != r."""

    @abstractmethod
    def hess_diag(self, X):
        """d2 k(x_r, x_r) / dx_{r mu} dx_{r eta}."""


class LinearKernel(Kernel):
    def cross(self, X1, X2):
        return self.spec.sigma * X1 @ X2.T

    def diag(self, X):
        return self.spec.sigma * np.sum(X**2, axis=1)

    def grad_cross(self, X1, X2):
        return np.broadcast_to(self.spec.sigma * X2[None, :, :], (len(X1),) + X2.shape).copy()

    def grad_diag(self, X):
        return 2 * self.spec.sigma * X

    def hess_cross(self, X):
        n, q = X.shape
        return np.broadcast_to(self.spec.sigma * np.eye(q), (n, n, q, q)).copy()

    def hess_same(self, X):
        n, q = X.shape
        return np.zeros((n, n, q, q))

    def hess_diag(self, X):
        n, q = X.shape
        return np.broadcast_to(2 * self.spec.sigma * np.eye(q), (n, q, q)).copy()


class PolynomialKernel(Kernel):
    """sigma * (1 + xi.xj)^degree; only degree 2 is reachable through KernelSpec."""

    def __init__(self, spec: KernelSpec, degree: int = POLY_DEGREE):
        super().__init__(spec)
        self.degree = degree

    def _powers(self, c, k):
        return self.spec.sigma * (1 + c) ** (self.degree - k)

    def cross(self, X1, X2):
        return self._powers(X1 @ X2.T, 0)

    def diag(self, X):
        return self._powers(np.sum(X**2, axis=1), 0)

    def grad_cross(self, X1, X2):
        a = self.degree * self._powers(X1 @ X2.T, 1)
        return a[:, :, None] * X2[None, :, :]

    def grad_diag(self, X):
        s = np.sum(X**2, axis=1)
        return 2 * self.degree * self._powers(s, 1)[:, None] * X

    def _second_factors(self, X):
        c = X @ X.T
        a1 = self.degree * self._powers(c, 1)
        a2 = self.degree * (self.degree - 1) * self._powers(c, 2)
        return a1, a2

    def hess_cross(self, X):
        q = X.shape[1]
        a1, a2 = self._second_factors(X)
        return (a2[:, :, None, None] * X[None, :, :, None] * X[:, None, None, :]
                + a1[:, :, None, None] * np.eye(q))

    def hess_same(self, X):
        _, a2 = self._second_factors(X)
        outer = X[:, :, None] * X[:, None, :]
        return a2[:, :, None, None] * outer[None, :, :, :]

    def hess_diag(self, X):
        q = X.shape[1]
        s = np.sum(X**2, axis=1)
        alpha = self.degree
        outer = X[:, :, None] * X[:, None, :]
        return (4 * alpha * (alpha - 1) * self._powers(s, 2)[:, None, None] * outer
                + 2 * alpha * self._powers(s, 1)[:, None, None] * np.eye(q))


class SquaredExponentialKernel(Kernel):
    def _diff(self, X1, X2):
        diff = X1[:, None, :] - X2[None, :, :]
        return diff, self.spec.sigma * np.exp(-0.5 * self.spec.lengthscale * np.sum(diff**2, axis=-1))

    def cross(self, X1, X2):
        return self._diff(X1, X2)[1]

    def diag(self, X):
        return np.full(len(X), self.spec.sigma)

    def grad_cross(self, X1, X2):
        diff, k = self._diff(X1, X2)
        return -self.spec.lengthscale * diff * k[:, :, None]

    def grad_diag(self, X):
        return np.zeros_like(X)

    def _curvature(self, X):
        l = self.spec.lengthscale
        diff, k = self._diff(X, X)
        outer = diff[:, :, :, None] * diff[:, :, None, :]
        return (l * np.eye(X.shape[1]) - l**2 * outer) * k[:, :, None, None]

    def hess_cross(self, X):
        return self._curvature(X)

    def hess_same(self, X):
        return -self._curvature(X)

    def hess_diag(self, X):
        n, q = X.shape
        return np.zeros((n, q, q))


def as_latent(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise InputError(f"Latent matrix must be N x q with N, q >= 1, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("Latent matrix contains non-finite values")
    return X


def factorize(K):
    """Cholesky factorization with one jitter retry."""
    jitter = 0.0
    try:
        chol = cho_factor(K, lower=True, check_finite=False)
    except LinAlgError:
        jitter = JITTER * float(np.mean(np.diag(K)))
        logger.warning(f"Kernel matrix not positive definite, retrying with jitter {jitter:.3g}")
        try:
            chol = cho_factor(K + jitter * np.eye(len(K)), lower=True, check_finite=False)
        except LinAlgError:
            _, D, _ = ldl(K)
            raise NumericalError(
                f"Cholesky factorization failed; smallest pivot {float(np.min(np.diag(D))):.6g}"
            ) from None
    logdet = 2 * float(np.sum(np.log(np.diag(chol[0]))))
    return KernelMatrix(K=K, chol=chol, logdet=logdet, jitter=jitter)


def kernel_matrix(X, spec: KernelSpec) -> KernelMatrix:
    X = as_latent(X)
    K = Kernel.create(spec).cross(X, X)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += spec.noise_var
    return factorize(K)


def kernel_gradient_pattern(X, spec: KernelSpec) -> GplvmGradSparsity:
    X = as_latent(X)
    kernel = Kernel.create(spec)
    values = kernel.grad_cross(X, X)
    idx = np.arange(len(X))
    values[idx, idx, :] = kernel.grad_diag(X)
    return GplvmGradSparsity(values=values)


@dataclass
class SourceTerms:
    """Quantities of one source shared by the value, gradient and Hessian."""
    km: KernelMatrix
    alpha: np.ndarray
    d: int
    value: float

    @property
    def n(self):
        return self.alpha.shape[0]

    @property
    def inverse(self):
        return self.km.inverse

    @property
    def projected_scatter(self):
        # K^-1 S K^-1 with S = Y Y^T / d
        return self.alpha @ self.alpha.T / self.d

    @property
    def dL_dK(self):
        return self.d / (2 * self.n) * (self.inverse - self.projected_scatter)


def source_terms(Y, X, spec: KernelSpec) -> SourceTerms:
    n, d = Y.shape
    km = kernel_matrix(X, spec)
    alpha = km.solve(Y)
    value = np.sum(Y * alpha) / (2 * n) + d * km.logdet / (2 * n) + d * LOG_2PI / 2
    return SourceTerms(km=km, alpha=alpha, d=d, value=float(value))


def check_sources(Y_set, X, specs):
    X = as_latent(X)
    Y_set = [np.asarray(Y, dtype=float) for Y in Y_set]
    if len(Y_set) == 0:
        raise InputError("At least one observed data source is required")
    if len(Y_set) != len(specs):
        raise InputError(f"Got {len(Y_set)} data sources but {len(specs)} kernel specs")
    for s, Y in enumerate(Y_set):
        if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
            raise InputError(f"Source {s + 1} has shape {Y.shape}; expected {X.shape[0]} rows")
        if not np.all(np.isfinite(Y)):
            raise InputError(f"Source {s + 1} contains non-finite values")
    return Y_set, X


def _grad_from_terms(X, spec, G):
    kernel = Kernel.create(spec)
    D = kernel.grad_cross(X, X)
    G_off = G - np.diag(np.diag(G))
    return 2 * np.einsum("rj,rjm->rm", G_off, D) + np.diag(G)[:, None] * kernel.grad_diag(X)


def _hessian_from_terms(X, spec, terms: SourceTerms):
    n, q = X.shape
    kernel = Kernel.create(spec)
    G = terms.dL_dK
    G_off = G - np.diag(np.diag(G))

    # curvature of K itself
    H = (2 * G_off[:, :, None, None] * kernel.hess_cross(X)).transpose(0, 2, 1, 3).reshape(n * q, n * q)
    same = 2 * np.einsum("rj,rjmn->rmn", G_off, kernel.hess_same(X)) + np.diag(G)[:, None, None] * kernel.hess_diag(X)
    for r in range(n):
        H[r * q:(r + 1) * q, r * q:(r + 1) * q] += same[r]

    # dK/dx_a = e_r v_a^T + v_a e_r^T
    V = kernel.grad_cross(X, X).transpose(0, 2, 1).copy()
    idx = np.arange(n)
    V[idx, :, idx] = 0.5 * kernel.grad_diag(X)
    V = V.reshape(n * q, n)
    rows = np.repeat(idx, q)

    def trace_pair(P, Q):
        # tr(P dK_a Q dK_b) for all a, b
        PV = P @ V.T
        QV = Q @ V.T
        return (PV[rows, :] * QV[rows, :].T
                + P[np.ix_(rows, rows)] * (V @ QV)
                + Q[np.ix_(rows, rows)] * (V @ PV)
                + PV[rows, :].T * QV[rows, :])

    A = terms.inverse
    B = terms.projected_scatter
    H += terms.d / (2 * n) * (2 * trace_pair(B, A) - trace_pair(A, A))
    return H


def gplvm_value_and_grad(Y_set, X, specs, pin_mask=None):
    Y_set, X = check_sources(Y_set, X, specs)
    value = 0.0
    grad = np.zeros_like(X)
    for Y, spec in zip(Y_set, specs):
        terms = source_terms(Y, X, spec)
        value += terms.value
        grad += _grad_from_terms(X, spec, terms.dL_dK)
    if pin_mask is not None:
        grad[pin_mask] = 0.0
    return value, grad


def gplvm_nll(Y_set, X, specs) -> float:
    Y_set, X = check_sources(Y_set, X, specs)
    return sum(source_terms(Y, X, spec).value for Y, spec in zip(Y_set, specs))


def gplvm_grad_x(Y_set, X, specs, pin_mask=None):
    return gplvm_value_and_grad(Y_set, X, specs, pin_mask)[1]


def gplvm_hessian_xx(Y_set, X, specs, pin_mask=None):
    """Exact Hessian over row-major latent coordinates; pinned coordinates are dropped."""
    Y_set, X = check_sources(Y_set, X, specs)
    n, q = X.shape
    H = np.zeros((n * q, n * q))
    for Y, spec in zip(Y_set, specs):
        H += _hessian_from_terms(X, spec, source_terms(Y, X, spec))
    H = 0.5 * (H + H.T)
    if pin_mask is not None:
        free = ~np.asarray(pin_mask).ravel()
        H = H[np.ix_(free, free)]
    return H
