import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import integrate

from .errors import InputError, NumericalError
from .kernels import Kernel, KernelFamily, kernel_matrix
from .model import ModelFit
from .optimize import OptimOptions, minimize
from .wphm import base_hazard, cum_hazard

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
TAIL_MASS = 1e-12
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ProjectionOptions:
    starts: int = 10
    seed: int = 0
    gtol: float = 1e-8
    max_iterations: int = 500
    nearest_start: bool = True
    trace: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.starts < 1:
            raise InputError(f"Projection needs at least one start, got {self.starts}")


@dataclass
class LatentProjection:
    x_star: np.ndarray
    value: float
    variances: list
    converged: bool
    trace: list = field(default_factory=list)


@dataclass(frozen=True)
class EventTimePrediction:
    mean: float
    variance: float
    risk: float

    @property
    def std(self):
        return float(np.sqrt(self.variance))


@dataclass
class _SourcePredictor:
    """GP predictive mean and variance of one training source at a new latent point."""
    kernel: Kernel
    X: np.ndarray
    alpha: np.ndarray
    km: object
    noise_var: float

    @classmethod
    def build(cls, Y, X, spec):
        km = kernel_matrix(X, spec)
        return cls(Kernel.create(spec), X, km.solve(Y), km, spec.noise_var)

    def moments(self, x):
        x = x[None, :]
        k = self.kernel.cross(x, self.X)[0]
        v = self.km.solve(k)
        explained = self.kernel.diag(x)[0] - k @ v
        clipped = explained < 0
        var = max(explained, 0.0) + self.noise_var
        return k, v, k @ self.alpha, var, clipped

    def value_and_grad(self, x, y):
        """Negative log predictive density of y at x, and its gradient in x."""
        n, d = self.alpha.shape
        _, v, m, var, clipped = self.moments(x)
        resid = y - m
        rss = resid @ resid
        value = (d * (LOG_2PI + np.log(var)) / 2 + rss / (2 * var)) / n

        D = self.kernel.grad_cross(x[None, :], self.X)[0]
        dm = D.T @ self.alpha
        dvar = np.zeros_like(x) if clipped else self.kernel.grad_diag(x[None, :])[0] - 2 * D.T @ v
        grad = ((d / (2 * var) - rss / (2 * var**2)) * dvar - dm @ resid / var) / n
        return float(value), grad


class ProjectionObjective:
    """Negative log posterior of a new latent point given its observed sources.

    Sources given as None (or all-NaN) are treated as missing and omitted.
    """

    def __init__(self, y_star_set, fit: ModelFit):
        if len(y_star_set) != len(fit.specs):
            raise InputError(f"Expected {len(fit.specs)} sources, got {len(y_star_set)}")
        self.n = fit.n
        self.terms = []
        for s, (y, Y, spec) in enumerate(zip(y_star_set, fit.Y_set, fit.specs), start=1):
            if y is None:
                continue
            y = np.asarray(y, dtype=float).ravel()
            if np.all(np.isnan(y)):
                continue
            if y.size != Y.shape[1]:
                raise InputError(f"Source {s} has {y.size} values; the model was trained on {Y.shape[1]}")
            if not np.all(np.isfinite(y)):
                raise InputError(f"Source {s} is partially missing; only whole sources may be omitted")
            self.terms.append((s - 1, y, _SourcePredictor.build(Y, fit.X, spec)))
        if not self.terms:
            raise InputError("At least one data source must be observed to project a new individual")
        self.sigma1 = fit.priors.sigma1
        self.latent_prior = fit.priors.enabled and any(s.family is KernelFamily.SE for s in fit.specs)

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        value, grad = 0.0, np.zeros_like(x)
        for _, y, predictor in self.terms:
            v, g = predictor.value_and_grad(x, y)
            value += v
            grad += g
        if self.latent_prior:
            s2 = self.sigma1**2
            value += (x @ x / (2 * s2) + x.size * np.log(2 * np.pi * s2) / 2) / self.n
            grad += x / (self.n * s2)
        return value, grad

    def variances(self, x, n_sources):
        out = [None] * n_sources
        for s, _, predictor in self.terms:
            out[s] = predictor.moments(np.asarray(x, dtype=float))[3]
        return out

    def nearest_training_row(self, fit: ModelFit):
        s, y, _ = self.terms[0]
        return int(np.argmin(np.sum((fit.Y_set[s] - y) ** 2, axis=1)))


def project_new(y_star_set, fit: ModelFit, opts: ProjectionOptions = ProjectionOptions()) -> LatentProjection:
    """MAP latent point of a new individual, best of several starts."""
    objective = ProjectionObjective(y_star_set, fit)
    rng = np.random.default_rng(opts.seed)
    if objective.latent_prior:
        scale = np.full(fit.q, fit.priors.sigma1)
    else:
        scale = np.maximum(np.std(fit.X, axis=0), 1e-3)
    starts = list(rng.normal(size=(opts.starts, fit.q)) * scale)
    if opts.nearest_start:
        starts.append(fit.X[objective.nearest_training_row(fit)].copy())

    inner = OptimOptions(max_iterations=opts.max_iterations, gtol=opts.gtol, trace=opts.trace)
    best = None
    for x0 in starts:
        res = minimize(objective.value_and_grad, x0, inner)
        if best is None or res.value < best.value - TIE_TOL:
            best = res
        elif abs(res.value - best.value) <= TIE_TOL and np.linalg.norm(res.x) < np.linalg.norm(best.x):
            best = res
    if not best.converged:
        logger.warning(f"Projection stopped with gradient norm {best.grad_norm:.3g}")
    return LatentProjection(
        x_star=best.x,
        value=best.value,
        variances=objective.variances(best.x, len(fit.specs)),
        converged=best.converged,
        trace=best.trace,
    )


def risk_score(x_star, fit: ModelFit) -> float:
    if fit.wphm is None:
        raise InputError("Model was fitted without the survival term; no risk score is available")
    return float(np.asarray(x_star, dtype=float) @ fit.wphm.b)


def effective_scale(score, rho, nu):
    return rho * np.exp(-score / nu)


def event_time_density(s, score, rho, nu):
    """Event-time density of an individual with risk score b.x."""
    w = np.exp(score)
    return base_hazard(s, rho, nu) * w * np.exp(-cum_hazard(s, rho, nu) * w)


def truncation_time(score, rho, nu, tail=TAIL_MASS):
    return effective_scale(score, rho, nu) * (-np.log(tail)) ** (1 / nu)


def _moment(k, score, rho, nu, upper):
    points = None
    if nu > 1:
        mode = effective_scale(score, rho, nu) * ((nu - 1) / nu) ** (1 / nu)
        points = [mode]
    value, abserr, info = integrate.quad(
        lambda s: s**k * event_time_density(s, score, rho, nu), 0.0, upper,
        points=points, limit=200, epsabs=0.0, epsrel=1e-11, full_output=True,
    )[:3]
    if not np.isfinite(value) or abserr > 1e-6 * max(abs(value), 1e-300):
        raise NumericalError(f"Event-time quadrature did not converge (moment {k}, score={score:.6g}, "
                             f"rho={rho:.6g}, nu={nu:.6g}, error estimate {abserr:.3g})")
    return value


def event_time_moments(score, rho, nu):
    upper = truncation_time(score, rho, nu)
    mean = _moment(1, score, rho, nu, upper)
    second = _moment(2, score, rho, nu, upper)
    return mean, max(second - mean**2, 0.0)


def predict_event_time(x_star, fit: ModelFit) -> EventTimePrediction:
    score = risk_score(x_star, fit)
    mean, variance = event_time_moments(score, fit.wphm.rho, fit.wphm.nu)
    return EventTimePrediction(mean=mean, variance=variance, risk=score)


def predict_batch(y_rows, fit: ModelFit, opts: ProjectionOptions = ProjectionOptions(), ids=None) -> pd.DataFrame:
    """Project and predict every individual; y_rows is a list of per-source value lists (None for missing)."""
    ids = list(range(1, len(y_rows) + 1)) if ids is None else list(ids)
    seeds = np.random.SeedSequence(opts.seed).spawn(len(y_rows))

    def run(i):
        row_opts = ProjectionOptions(opts.starts, int(seeds[i].generate_state(1)[0]), opts.gtol,
                                     opts.max_iterations, opts.nearest_start)
        projection = project_new(y_rows[i], fit, row_opts)
        record = {"id": ids[i]}
        record.update({f"x{k + 1}": v for k, v in enumerate(projection.x_star)})
        if fit.wphm is not None:
            prediction = predict_event_time(projection.x_star, fit)
            record.update(risk=prediction.risk, mean_time=prediction.mean, std_time=prediction.std)
        record["converged"] = projection.converged
        return record

    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            records = list(pool.map(run, range(len(y_rows))))
    else:
        records = [run(i) for i in range(len(y_rows))]
    return pd.DataFrame.from_records(records)
