import logging

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from .errors import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: int

    def __post_init__(self):
        time = float(self.time)
        if not np.isfinite(time) or time <= 0:
            raise InputError(f"Survival time must be finite and positive, got {self.time}")
        if int(self.event) not in (0, 1):
            raise InputError(f"Event indicator must be 0 or 1, got {self.event}")
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", int(self.event))


@dataclass(frozen=True)
class SurvivalData:
    """Column view of a list of SurvivalRecord."""
    times: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        events = np.asarray(self.events).ravel()
        if times.shape != events.shape:
            raise InputError(f"Got {times.size} times but {events.size} event indicators")
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise InputError("Survival times must be finite and strictly positive")
        if not np.all(np.isin(events, (0, 1))):
            raise InputError("Event indicators must be 0 or 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events.astype(int))

    @classmethod
    def from_records(cls, records):
        if isinstance(records, cls):
            return records
        records = list(records)
        return cls(times=[r.time for r in records], events=[r.event for r in records])

    def records(self):
        return [SurvivalRecord(t, e) for t, e in zip(self.times, self.events)]

    def subset(self, index):
        return SurvivalData(self.times[index], self.events[index])

    def __len__(self):
        return len(self.times)

    @property
    def n_events(self):
        # N_1, the number of uncensored records
        return int(np.sum(self.events))


@dataclass(frozen=True)
class PriorConfig:
    kappa0: float = 3.0
    alpha0: float = 1.0
    kappa1: float = 3.0
    alpha1: float = 6.0
    sigma0: float = 2.0
    sigma1: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        for name in ("kappa0", "alpha0", "kappa1", "alpha1", "sigma0", "sigma1"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise InputError(f"Prior parameter {name} must be positive, got {value}")
            object.__setattr__(self, name, value)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y + np.log(-np.expm1(-np.minimum(y, 700))), np.log(np.expm1(np.minimum(y, 30))))


@dataclass(frozen=True)
class WphmParams:
    """Regression vector b, scale rho and shape nu.

    The optimizer works on rho = 1 + rho_lb + softplus(rho_tilde) and likewise for nu.
    """
    b: np.ndarray
    rho: float = 3.0
    nu: float = 10.0
    rho_lb: float = 0.0
    nu_lb: float = 0.0

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).copy()
        if b.ndim != 1 or not np.all(np.isfinite(b)):
            raise InputError("Regression vector b must be a finite 1-d array")
        if not self.rho > 0 or not self.nu > 0:
            raise InputError(f"Weibull scale and shape must be positive, got rho={self.rho}, nu={self.nu}")
        if self.rho_lb < 0 or self.nu_lb < 0:
            raise InputError("Lower bounds rho_lb and nu_lb must be non-negative")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "nu", float(self.nu))

    @classmethod
    def initial(cls, q, rho=3.0, nu=10.0, rho_lb=0.0, nu_lb=0.0):
        return cls(np.zeros(q), rho, nu, rho_lb, nu_lb)

    @classmethod
    def from_unconstrained(cls, theta, rho_lb=0.0, nu_lb=0.0):
        theta = np.asarray(theta, dtype=float)
        return cls(
            b=theta[:-2],
            rho=1 + rho_lb + float(softplus(theta[-2])),
            nu=1 + nu_lb + float(softplus(theta[-1])),
            rho_lb=rho_lb,
            nu_lb=nu_lb,
        )

    def _tilde(self, value, lb, name):
        excess = value - 1 - lb
        if excess <= 0:
            raise InputError(f"{name}={value} is not above its lower bound {1 + lb}")
        return float(softplus_inverse(excess))

    @property
    def rho_tilde(self):
        return self._tilde(self.rho, self.rho_lb, "rho")

    @property
    def nu_tilde(self):
        return self._tilde(self.nu, self.nu_lb, "nu")

    def unconstrained(self):
        return np.concatenate([self.b, [self.rho_tilde, self.nu_tilde]])

    def chain_factors(self):
        """First and second derivatives of (rho, nu) with respect to (rho_tilde, nu_tilde)."""
        s_rho, s_nu = expit(self.rho_tilde), expit(self.nu_tilde)
        return np.array([s_rho, s_nu]), np.array([s_rho * (1 - s_rho), s_nu * (1 - s_nu)])

    def with_b(self, b):
        return WphmParams(b, self.rho, self.nu, self.rho_lb, self.nu_lb)

    @property
    def q(self):
        return len(self.b)


def base_hazard(t, rho, nu):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or rho <= 0 or nu <= 0:
        raise InputError("base_hazard needs t >= 0 and positive rho, nu")
    return (nu / rho) * (t / rho) ** (nu - 1)


def cum_hazard(t, rho, nu):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or rho <= 0 or nu <= 0:
        raise InputError("cum_hazard needs t >= 0 and positive rho, nu")
    return (t / rho) ** nu


@dataclass
class _HazardTerms:
    """Per-record pieces shared by value, gradient and Hessian."""
    data: SurvivalData
    X: np.ndarray
    params: WphmParams
    log_ratio: np.ndarray = field(init=False)
    weight: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.params
        self.log_ratio = np.log(self.data.times) - np.log(p.rho)
        # Lambda_0(t_i) exp(b.x_i)
        self.weight = np.exp(p.nu * self.log_ratio + self.X @ p.b)

    @property
    def n(self):
        return len(self.data)


def _check(records, X, params):
    data = SurvivalData.from_records(records)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != len(data):
        raise InputError(f"Latent matrix has {X.shape[0]} rows but there are {len(data)} survival records")
    if X.shape[1] != params.q:
        raise InputError(f"Regression vector has length {params.q} but latent dimension is {X.shape[1]}")
    return _HazardTerms(data, X, params)


def _prior_value(params, priors, n):
    if not priors.enabled:
        return 0.0
    log_p = (np.sum(stats.norm.logpdf(params.b, scale=priors.sigma0))
             + stats.gamma.logpdf(params.nu, a=priors.kappa0, scale=priors.alpha0)
             + stats.gamma.logpdf(params.rho, a=priors.kappa1, scale=priors.alpha1))
    return -float(log_p) / n


def _value(h: _HazardTerms, priors):
    p, ev = h.params, h.data.events == 1
    log_lambda = np.log(p.nu) - np.log(p.rho) + (p.nu - 1) * h.log_ratio[ev]
    value = -np.sum(log_lambda + h.X[ev] @ p.b) / h.n + np.sum(h.weight) / h.n
    return float(value) + _prior_value(p, priors, h.n)


def _natural_grad(h: _HazardTerms, priors):
    """Gradient over (b, rho, nu)."""
    p, n, n1 = h.params, h.n, h.data.n_events
    ev = h.data.events == 1
    g_b = (-np.sum(h.X[ev], axis=0) + h.X.T @ h.weight) / n
    g_rho = n1 * p.nu / (n * p.rho) - p.nu / p.rho * np.sum(h.weight) / n
    g_nu = -n1 / (n * p.nu) - np.sum(h.log_ratio[ev]) / n + np.sum(h.log_ratio * h.weight) / n
    if priors.enabled:
        g_b = g_b + p.b / (n * priors.sigma0**2)
        g_rho += -(priors.kappa1 - 1) / (n * p.rho) + 1 / (n * priors.alpha1)
        g_nu += -(priors.kappa0 - 1) / (n * p.nu) + 1 / (n * priors.alpha0)
    return np.concatenate([g_b, [g_rho, g_nu]])


def _natural_hessian(h: _HazardTerms, priors):
    p, n, n1 = h.params, h.n, h.data.n_events
    q = p.q
    w, lr, X = h.weight, h.log_ratio, h.X
    H = np.zeros((q + 2, q + 2))
    H[:q, :q] = (X * w[:, None]).T @ X / n
    H[:q, q] = -p.nu / p.rho * (X.T @ w) / n
    H[:q, q + 1] = (X.T @ (lr * w)) / n
    H[q, q] = -n1 * p.nu / (n * p.rho**2) + p.nu * (p.nu + 1) / p.rho**2 * np.sum(w) / n
    H[q + 1, q + 1] = n1 / (n * p.nu**2) + np.sum(lr**2 * w) / n
    H[q, q + 1] = n1 / (n * p.rho) - np.sum((p.nu / p.rho * lr + 1 / p.rho) * w) / n
    if priors.enabled:
        H[:q, :q] += np.eye(q) / (n * priors.sigma0**2)
        H[q, q] += (priors.kappa1 - 1) / (n * p.rho**2)
        H[q + 1, q + 1] += (priors.kappa0 - 1) / (n * p.nu**2)
    H[q, :q] = H[:q, q]
    H[q + 1, :q] = H[:q, q + 1]
    H[q + 1, q] = H[q, q + 1]
    return H


def to_unconstrained_grad(g, params):
    d1, _ = params.chain_factors()
    g = g.copy()
    g[-2:] *= d1
    return g


def to_unconstrained_hessian(H, g, params):
    d1, d2 = params.chain_factors()
    J = np.concatenate([np.ones(params.q), d1])
    H = H * np.outer(J, J)
    H[-2, -2] += g[-2] * d2[0]
    H[-1, -1] += g[-1] * d2[1]
    return H


def wphm_nll(records, X, params: WphmParams, priors: PriorConfig = PriorConfig()) -> float:
    return _value(_check(records, X, params), priors)


def wphm_grad(records, X, params: WphmParams, priors: PriorConfig = PriorConfig()):
    """Gradient over the unconstrained vector (b, rho_tilde, nu_tilde)."""
    h = _check(records, X, params)
    return to_unconstrained_grad(_natural_grad(h, priors), params)


def wphm_grad_natural(records, X, params: WphmParams, priors: PriorConfig = PriorConfig()):
    return _natural_grad(_check(records, X, params), priors)


def wphm_hessian(records, X, params: WphmParams, priors: PriorConfig = PriorConfig()):
    h = _check(records, X, params)
    return to_unconstrained_hessian(_natural_hessian(h, priors), _natural_grad(h, priors), params)


def wphm_hessian_natural(records, X, params: WphmParams, priors: PriorConfig = PriorConfig()):
    return _natural_hessian(_check(records, X, params), priors)


def wphm_grad_x(records, X, params: WphmParams):
    """Survival-term gradient with respect to the latent matrix."""
    h = _check(records, X, params)
    return np.outer(h.weight - h.data.events, params.b) / h.n


def wphm_hessian_x_blocks(records, X, params: WphmParams):
    """Per-row q x q blocks of the survival-term latent Hessian (it is block diagonal)."""
    h = _check(records, X, params)
    b = params.b
    return h.weight[:, None, None] * np.outer(b, b)[None, :, :] / h.n


def wphm_cross_x_params(records, X, params: WphmParams):
    """Mixed second derivatives d2/dx_{r mu} d(b, rho_tilde, nu_tilde), shape (N, q, q + 2)."""
    h = _check(records, X, params)
    n, q = X.shape
    b, w = params.b, h.weight
    cross = np.zeros((n, q, q + 2))
    cross[:, :, :q] = (w[:, None, None] * b[None, :, None] * h.X[:, None, :]
                       + (w - h.data.events)[:, None, None] * np.eye(q)[None, :, :])
    d1, _ = params.chain_factors()
    cross[:, :, q] = -params.nu / params.rho * (w[:, None] * b[None, :]) * d1[0]
    cross[:, :, q + 1] = (h.log_ratio * w)[:, None] * b[None, :] * d1[1]
    return cross / n


def wphm_value_and_grad(records, X, params, priors=PriorConfig()):
    h = _check(records, X, params)
    return _value(h, priors), to_unconstrained_grad(_natural_grad(h, priors), params)


def fit_wphm(records, X, priors=PriorConfig(), init: WphmParams = None, opts=None):
    """MAP estimate of (b, rho, nu) for fixed covariates X.

    Also serves as the observed-space baseline when X is the standardized data matrix.
    """
    from .optimize import OptimOptions, minimize

    data = SurvivalData.from_records(records)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    init = init if init is not None else WphmParams.initial(X.shape[1])
    rho_lb, nu_lb = init.rho_lb, init.nu_lb

    def objective(theta):
        return wphm_value_and_grad(data, X, WphmParams.from_unconstrained(theta, rho_lb, nu_lb), priors)

    result = minimize(objective, init.unconstrained(), opts or OptimOptions())
    if not result.converged:
        logger.info(f"WPHM block stopped after {result.iterations} iterations: {result.message}")
    return WphmParams.from_unconstrained(result.x, rho_lb, nu_lb), result
