import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import optimize as sopt
from scipy import stats
from scipy.linalg import LinAlgError, cho_factor

from .errors import ConvergenceError, InputError, NumericalError
from .kernels import (
    KernelFamily,
    KernelSpec,
    check_sources,
    gplvm_hessian_xx,
    gplvm_value_and_grad,
)
from .optimize import OptimOptions, minimize
from .wphm import (
    PriorConfig,
    SurvivalData,
    WphmParams,
    wphm_cross_x_params,
    wphm_grad_x,
    wphm_hessian,
    wphm_hessian_natural,
    wphm_hessian_x_blocks,
    wphm_value_and_grad,
)

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
DEGENERATE_ANCHOR = 1e-6


def pin_mask_for(n, q):
    """Entries x_ij with i < q and j > i are frozen at zero."""
    mask = np.zeros((n, q), dtype=bool)
    for i in range(min(n, q)):
        mask[i, i + 1:] = True
    return mask


def free_parameter_count(n, q, use_survival=True):
    return n * q - int(pin_mask_for(n, q).sum()) + (q + 2 if use_survival else 0)


@dataclass(frozen=True)
class LatentState:
    X: np.ndarray
    pin_mask: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float)).copy()
        n, q = X.shape
        mask = pin_mask_for(n, q) if self.pin_mask is None else np.asarray(self.pin_mask, dtype=bool)
        if mask.shape != X.shape:
            raise InputError(f"Pin mask shape {mask.shape} does not match latent shape {X.shape}")
        X[mask] = 0.0
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "pin_mask", mask)

    @classmethod
    def random(cls, n, q, rng, scale=1.0):
        return cls(rng.normal(scale=scale, size=(n, q)))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def q(self):
        return self.X.shape[1]

    def free_values(self):
        return self.X[~self.pin_mask]

    def with_free(self, values):
        X = np.zeros_like(self.X)
        X[~self.pin_mask] = values
        return LatentState(X, self.pin_mask)

    def signs(self):
        # columns past the last row have no anchor and keep their sign
        signs = np.ones(self.q)
        diag = np.diag(self.X)
        signs[: len(diag)] = np.where(diag < 0, -1.0, 1.0)
        return signs

    def fix_signs(self, b=None):
        """Reflect latent columns so the pinned diagonal entries are non-negative.

        The matching entries of b flip too, so b.x is unchanged.
        """
        signs = self.signs()
        latent = LatentState(self.X * signs, self.pin_mask)
        return latent, (None if b is None else np.asarray(b) * signs)


@dataclass(frozen=True)
class FitOptions:
    restarts: int = None
    max_outer: int = 100
    tol_outer: float = 1e-6
    gtol: float = 1e-6
    fit_gtol: float = 1e-4
    inner_max_iterations: int = 500
    rho_init: float = 3.0
    nu_init: float = 10.0
    rho_lb: float = 0.0
    nu_lb: float = 0.0
    init_scale: float = 1.0
    use_survival: bool = True
    polish: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.restarts is not None and self.restarts < 1:
            raise InputError(f"restarts must be at least 1, got {self.restarts}")
        if self.max_outer < 1:
            raise InputError(f"max_outer must be at least 1, got {self.max_outer}")
        if not (self.tol_outer > 0 and self.gtol > 0 and self.fit_gtol > 0):
            raise InputError("Fit tolerances must be positive")
        if self.workers < 1:
            raise InputError(f"workers must be at least 1, got {self.workers}")
        if self.rho_init <= 1 + self.rho_lb or self.nu_init <= 1 + self.nu_lb:
            raise InputError("Initial rho and nu must lie above their lower bounds plus one")

    def restarts_for(self, specs):
        if self.restarts is not None:
            return self.restarts
        linear = all(spec.family is KernelFamily.LINEAR for spec in specs)
        return 1 if linear else 5

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class ModelFit:
    latent: LatentState
    wphm: WphmParams
    specs: list
    priors: PriorConfig
    Y_set: list
    survival: SurvivalData
    nll: float
    hyp_nll: float
    free_param_count: int
    hessian_logdet: float
    converged: bool
    restarts_used: int
    grad_norm: float = np.nan
    outer_rounds: int = 0
    inner_iterations: int = 0
    nll_trace: list = field(default_factory=list)
    ascent_rounds: list = field(default_factory=list)
    seed: int = 0

    @property
    def use_survival(self):
        return self.wphm is not None

    @property
    def X(self):
        return self.latent.X

    @property
    def n(self):
        return self.latent.n

    @property
    def q(self):
        return self.latent.q

    def risk_scores(self):
        if self.wphm is None:
            return np.zeros(self.n)
        return self.X @ self.wphm.b

    def objective(self):
        return JointObjective(self.Y_set, self.survival, self.specs, self.priors, self.latent.pin_mask,
                              self.use_survival, *self._bounds())

    def _bounds(self):
        if self.wphm is None:
            return 0.0, 0.0
        return self.wphm.rho_lb, self.wphm.nu_lb

    def summary(self):
        lines = [
            f"q={self.q}  N={self.n}  sources={len(self.specs)}",
            f"NLL={self.nll:.6f}  hyper-NLL={self.hyp_nll:.6f}  P={self.free_param_count}",
            f"converged={self.converged}  restarts={self.restarts_used}  outer rounds={self.outer_rounds}",
        ]
        for s, spec in enumerate(self.specs, start=1):
            lines.append(f"source {s}: kernel={spec.family.value} beta2={spec.noise_var:.6g} "
                         f"sigma={spec.sigma:.6g} l={spec.lengthscale:.6g}")
        if self.wphm is not None:
            b = ", ".join(f"{v:.4f}" for v in self.wphm.b)
            lines.append(f"b=({b})  rho={self.wphm.rho:.4f}  nu={self.wphm.nu:.4f}")
        return "\n".join(lines)


class JointObjective:
    """Joint negative log posterior over the free latent entries and (b, rho_tilde, nu_tilde)."""

    def __init__(self, Y_set, records, specs, priors, pin_mask, use_survival=True, rho_lb=0.0, nu_lb=0.0):
        self.pin_mask = np.asarray(pin_mask, dtype=bool)
        self.n, self.q = self.pin_mask.shape
        self.Y_set, _ = check_sources(Y_set, np.zeros((self.n, self.q)), specs)
        self.specs = list(specs)
        self.priors = priors
        self.use_survival = use_survival
        self.rho_lb, self.nu_lb = rho_lb, nu_lb
        self.survival = None
        if use_survival:
            if records is None:
                raise InputError("Survival records are required unless the survival term is disabled")
            self.survival = SurvivalData.from_records(records)
            if len(self.survival) != self.n:
                raise InputError(f"Got {len(self.survival)} survival records for {self.n} individuals")
        self.free = ~self.pin_mask.ravel()
        self.n_free_x = int(self.free.sum())
        self.n_params = self.q + 2 if use_survival else 0
        self.latent_prior = priors.enabled and any(s.family is KernelFamily.SE for s in self.specs)

    @property
    def size(self):
        return self.n_free_x + self.n_params

    def pack(self, latent: LatentState, params: WphmParams = None):
        theta = latent.free_values()
        if self.use_survival:
            theta = np.concatenate([theta, params.unconstrained()])
        return theta

    def unpack(self, theta):
        X = np.zeros(self.n * self.q)
        X[self.free] = theta[:self.n_free_x]
        latent = LatentState(X.reshape(self.n, self.q), self.pin_mask)
        params = None
        if self.use_survival:
            params = WphmParams.from_unconstrained(theta[self.n_free_x:], self.rho_lb, self.nu_lb)
        return latent, params

    def _latent_prior(self, X):
        if not self.latent_prior:
            return 0.0, np.zeros_like(X)
        s1 = self.priors.sigma1
        value = -np.sum(stats.norm.logpdf(X, scale=s1)) / self.n
        return float(value), X / (self.n * s1**2)

    def value_and_grad(self, theta):
        latent, params = self.unpack(theta)
        X = latent.X
        value, g_x = gplvm_value_and_grad(self.Y_set, X, self.specs)
        prior_value, prior_grad = self._latent_prior(X)
        value += prior_value
        g_x = g_x + prior_grad
        g_params = np.zeros(0)
        if self.use_survival:
            v_s, g_params = wphm_value_and_grad(self.survival, X, params, self.priors)
            value += v_s
            g_x = g_x + wphm_grad_x(self.survival, X, params)
        return value, np.concatenate([g_x.ravel()[self.free], g_params])

    def value(self, theta):
        return self.value_and_grad(theta)[0]

    def x_block(self, params: WphmParams):
        """Objective over the free latent entries with the survival parameters held fixed."""
        tail = params.unconstrained() if self.use_survival else np.zeros(0)

        def fun(x_free):
            value, grad = self.value_and_grad(np.concatenate([x_free, tail]))
            return value, grad[:self.n_free_x]
        return fun

    def param_block(self, latent: LatentState):
        X = latent.X
        offset = gplvm_value_and_grad(self.Y_set, X, self.specs)[0] + self._latent_prior(X)[0]

        def fun(theta_params):
            params = WphmParams.from_unconstrained(theta_params, self.rho_lb, self.nu_lb)
            value, grad = wphm_value_and_grad(self.survival, X, params, self.priors)
            return offset + value, grad
        return fun

    def hessian(self, theta, natural=False):
        """Exact P x P Hessian over the free parameters.

        With natural=True the survival parameters are (b, rho, nu) instead of their
        unconstrained counterparts.
        """
        latent, params = self.unpack(theta)
        X = latent.X
        n, q = self.n, self.q
        H_xx = gplvm_hessian_xx(self.Y_set, X, self.specs)
        if self.latent_prior:
            H_xx += np.eye(n * q) / (n * self.priors.sigma1**2)
        if not self.use_survival:
            return H_xx[np.ix_(self.free, self.free)]

        blocks = wphm_hessian_x_blocks(self.survival, X, params)
        for r in range(n):
            H_xx[r * q:(r + 1) * q, r * q:(r + 1) * q] += blocks[r]
        cross = wphm_cross_x_params(self.survival, X, params).reshape(n * q, q + 2)
        if natural:
            d1, _ = params.chain_factors()
            cross[:, q:] /= d1
            H_pp = wphm_hessian_natural(self.survival, X, params, self.priors)
        else:
            H_pp = wphm_hessian(self.survival, X, params, self.priors)

        H_xx = H_xx[np.ix_(self.free, self.free)]
        cross = cross[self.free]
        H = np.block([[H_xx, cross], [cross.T, H_pp]])
        return 0.5 * (H + H.T)


def _objective_for(Y_set, records, latent, wphm, specs, priors, use_survival=None):
    use_survival = (wphm is not None) if use_survival is None else use_survival
    lbs = (wphm.rho_lb, wphm.nu_lb) if wphm is not None else (0.0, 0.0)
    objective = JointObjective(Y_set, records, specs, priors, latent.pin_mask, use_survival, *lbs)
    return objective, objective.pack(latent, wphm)


def joint_nll(Y_set, records, latent: LatentState, wphm: WphmParams, specs, priors=PriorConfig()) -> float:
    """GPLVM term plus survival term plus latent and survival priors.

    Pass wphm=None to drop the survival term.
    """
    objective, theta = _objective_for(Y_set, records, latent, wphm, specs, priors)
    return objective.value(theta)


def joint_grad(Y_set, records, latent: LatentState, wphm: WphmParams, specs, priors=PriorConfig()):
    """Returns (N x q latent gradient with pinned entries reported as 0, gradient over (b, rho_tilde, nu_tilde))."""
    objective, theta = _objective_for(Y_set, records, latent, wphm, specs, priors)
    _, grad = objective.value_and_grad(theta)
    g_x = np.zeros(latent.n * latent.q)
    g_x[objective.free] = grad[:objective.n_free_x]
    return g_x.reshape(latent.n, latent.q), grad[objective.n_free_x:]


def assemble_hessian(Y_set, records, latent: LatentState, wphm: WphmParams, specs, priors=PriorConfig(),
                     natural=False):
    objective, theta = _objective_for(Y_set, records, latent, wphm, specs, priors)
    return objective.hessian(theta, natural=natural)


def hessian_logdet(H, n):
    """log|N H| from a Cholesky factorization; raises NumericalError when H is not positive definite."""
    try:
        c, _ = cho_factor(n * H, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        raise NumericalError("Hessian is not positive definite at the fitted optimum; refit from another start")
    return float(2 * np.sum(np.log(np.diag(c))))


def laplace_value(nll, logdet, P, n):
    return nll - P * LOG_2PI / (2 * n) + logdet / (2 * n)


def laplace_hyp_nll(fit: ModelFit, specs=None) -> float:
    """Laplace approximation of the negative log marginal likelihood per individual."""
    if specs is not None and list(specs) != list(fit.specs):
        raise InputError("Kernel specs differ from those the fit was made with; refit first")
    objective = fit.objective()
    theta = objective.pack(fit.latent, fit.wphm)
    H = objective.hessian(theta, natural=True)
    logdet = hessian_logdet(H, fit.n)
    return laplace_value(fit.nll, logdet, H.shape[0], fit.n)


@dataclass
class _Attempt:
    latent: LatentState
    params: WphmParams
    nll: float
    grad_norm: float
    outer_rounds: int
    outer_converged: bool
    inner_iterations: int
    trace: list
    ascents: list = field(default_factory=list)
    logdet: float = np.nan
    pd: bool = False


def _run_attempt(objective: JointObjective, latent, params, opts: FitOptions):
    inner = OptimOptions(max_iterations=opts.inner_max_iterations, gtol=opts.gtol)
    theta = objective.pack(latent, params)
    nll = objective.value(theta)
    trace = [nll]
    iterations, outer_converged, rounds = 0, False, 0
    ascents = []

    for rounds in range(1, opts.max_outer + 1):
        res = minimize(objective.x_block(params), latent.free_values(), inner)
        latent = latent.with_free(res.x)
        iterations += res.iterations
        value = res.value
        if objective.use_survival:
            res = minimize(objective.param_block(latent), params.unconstrained(), inner)
            params = WphmParams.from_unconstrained(res.x, objective.rho_lb, objective.nu_lb)
            iterations += res.iterations
            value = res.value
        if value > trace[-1] + 1e-10 * max(1.0, abs(trace[-1])):
            logger.warning(f"Joint NLL increased in outer round {rounds}: {trace[-1]:.10g} -> {value:.10g}")
            ascents.append(rounds)
        trace.append(value)
        if abs(trace[-2] - value) < opts.tol_outer:
            outer_converged = True
            break

    if opts.polish:
        polish = OptimOptions(max_iterations=opts.inner_max_iterations, gtol=opts.gtol)
        res = minimize(objective.value_and_grad, objective.pack(latent, params), polish)
        latent, params = objective.unpack(res.x)
        iterations += res.iterations
        trace.append(res.value)

    b = params.b if params is not None else None
    latent, b = latent.fix_signs(b)
    if params is not None:
        params = params.with_b(b)
    theta = objective.pack(latent, params)
    nll, grad = objective.value_and_grad(theta)
    attempt = _Attempt(latent, params, nll, float(np.max(np.abs(grad), initial=0.0)), rounds,
                       outer_converged, iterations, trace, ascents)
    try:
        attempt.logdet = hessian_logdet(objective.hessian(theta, natural=True), objective.n)
        attempt.pd = True
    except NumericalError:
        logger.info("Hessian not positive definite at this restart's optimum")
    return attempt


def _initial_state(n, q, rng, opts: FitOptions, use_survival):
    latent = LatentState.random(n, q, rng, opts.init_scale)
    params = WphmParams.initial(q, opts.rho_init, opts.nu_init, opts.rho_lb, opts.nu_lb) if use_survival else None
    return latent, params


def _check_anchors(latent: LatentState):
    diag = np.abs(np.diag(latent.X))
    scale = max(float(np.max(np.abs(latent.X))), 1.0)
    if np.any(diag < DEGENERATE_ANCHOR * scale):
        logger.warning("A pinned anchor entry is close to zero; the latent rotation may not be fully identified")


def fit_map(Y_set, records, q, specs, priors=PriorConfig(), opts: FitOptions = FitOptions(), init=None) -> ModelFit:
    """MAP fit by alternating latent and survival-parameter minimization, best of several restarts.

    `init` is an optional (LatentState, WphmParams) pair used as the first start.
    """
    if q < 1:
        raise InputError(f"Latent dimension must be at least 1, got {q}")
    Y_set = [np.asarray(Y, dtype=float) for Y in Y_set]
    n = Y_set[0].shape[0] if Y_set else 0
    pin_mask = pin_mask_for(n, q)
    objective = JointObjective(Y_set, records, specs, priors, pin_mask, opts.use_survival, opts.rho_lb, opts.nu_lb)
    min_d = min(Y.shape[1] for Y in Y_set)
    if q >= min_d:
        logger.warning(f"Latent dimension q={q} is not below the smallest source dimension d={min_d}")

    restarts = opts.restarts_for(specs)
    seeds = np.random.SeedSequence(opts.seed).spawn(2 * restarts)
    starts = [_initial_state(n, q, np.random.default_rng(s), opts, opts.use_survival) for s in seeds]
    if init is not None:
        latent0, params0 = init
        latent0 = LatentState(latent0.X, pin_mask)
        if opts.use_survival and params0 is None:
            params0 = starts[0][1]
        starts[0] = (latent0, params0 if opts.use_survival else None)

    def run(batch):
        if opts.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=opts.workers) as pool:
                return list(pool.map(lambda s: _run_attempt(objective, *s, opts), batch))
        return [_run_attempt(objective, *s, opts) for s in batch]

    attempts = run(starts[:restarts])
    if not any(a.pd for a in attempts):
        logger.warning(f"No positive definite Hessian after {restarts} restarts; retrying from fresh starts")
        attempts += run(starts[restarts:])

    candidates = [a for a in attempts if a.pd] or attempts
    best = min(candidates, key=lambda a: a.nll)
    converged = best.pd and best.outer_converged and best.grad_norm <= opts.fit_gtol and not best.ascents
    if not converged:
        logger.warning(f"Fit did not converge (pd={best.pd}, outer={best.outer_converged}, "
                       f"gradient norm={best.grad_norm:.3g}, ascent rounds={best.ascents})")
    _check_anchors(best.latent)

    P = objective.size
    hyp = laplace_value(best.nll, best.logdet, P, n) if best.pd else np.inf
    return ModelFit(
        latent=best.latent,
        wphm=best.params,
        specs=list(specs),
        priors=priors,
        Y_set=objective.Y_set,
        survival=objective.survival,
        nll=best.nll,
        hyp_nll=hyp,
        free_param_count=P,
        hessian_logdet=best.logdet,
        converged=converged,
        restarts_used=len(attempts),
        grad_norm=best.grad_norm,
        outer_rounds=best.outer_rounds,
        inner_iterations=sum(a.inner_iterations for a in attempts),
        nll_trace=best.trace,
        ascent_rounds=best.ascents,
        seed=opts.seed,
    )


@dataclass(frozen=True)
class HyperOptions:
    optimize: bool = True
    warm_start: bool = True
    max_evaluations: int = 60
    log_bounds: tuple = (np.log(1e-5), np.log(1e2))
    xatol: float = 1e-2
    fatol: float = 1e-6

    def __post_init__(self):
        if self.max_evaluations < 1:
            raise InputError(f"max_evaluations must be at least 1, got {self.max_evaluations}")
        lo, hi = self.log_bounds
        if not lo < hi:
            raise InputError(f"Invalid hyperparameter bounds {self.log_bounds}")


@dataclass
class HyperOptResult:
    specs: list
    fit: ModelFit
    trace: list
    inner_iterations: int
    evaluations: int

    def __iter__(self):
        return iter((self.specs, self.fit))


def hyper_vector(specs):
    values = []
    for spec in specs:
        values.append(np.log(spec.noise_var))
        if not spec.fixed_sigma:
            values += [np.log(spec.sigma), np.log(spec.lengthscale)]
    return np.array(values)


def specs_from_vector(v, template):
    specs, i = [], 0
    for spec in template:
        changes = {"noise_var": float(np.exp(v[i]))}
        i += 1
        if not spec.fixed_sigma:
            changes.update(sigma=float(np.exp(v[i])), lengthscale=float(np.exp(v[i + 1])))
            i += 2
        specs.append(spec.replace(**changes))
    return specs


def optimize_hyperparameters(Y_set, records, q, specs, priors=PriorConfig(), opts: FitOptions = FitOptions(),
                             hyper: HyperOptions = HyperOptions(), init=None) -> HyperOptResult:
    """Minimize the Laplace hyper-NLL over noise variances (and sigma, l for SE sources).

    Each evaluation refits the MAP, warm-started from the best optimum seen so far.
    """
    specs = list(specs)
    if not hyper.optimize:
        fit = fit_map(Y_set, records, q, specs, priors, opts, init)
        return HyperOptResult(specs, fit, [(hyper_vector(specs), fit.hyp_nll)], fit.inner_iterations, 1)

    cache, trace = {}, []
    state = {"init": init, "best": np.inf, "iterations": 0}

    def evaluate(v):
        v = np.clip(np.atleast_1d(v), *hyper.log_bounds)
        key = tuple(np.round(v, 12))
        if key in cache:
            return cache[key].hyp_nll
        trial = specs_from_vector(v, specs)
        warm = state["init"] if hyper.warm_start else None
        fit_opts = opts.replace(restarts=1) if warm is not None else opts
        try:
            fit = fit_map(Y_set, records, q, trial, priors, fit_opts, warm)
        except NumericalError as exc:
            logger.info(f"Hyperparameter point {np.exp(v)} failed: {exc}")
            return np.inf
        cache[key] = fit
        state["iterations"] += fit.inner_iterations
        trace.append((np.exp(v), fit.hyp_nll))
        if fit.hyp_nll < state["best"]:
            state["best"] = fit.hyp_nll
            state["init"] = (fit.latent, fit.wphm)
        return fit.hyp_nll

    v0 = hyper_vector(specs)
    if v0.size == 1:
        lo, hi = hyper.log_bounds
        sopt.minimize_scalar(lambda s: evaluate([s]), bounds=(lo, hi), method="bounded",
                             options={"xatol": hyper.xatol, "maxiter": hyper.max_evaluations})
    else:
        evaluate(v0)
        sopt.minimize(evaluate, v0, method="Nelder-Mead",
                      options={"xatol": hyper.xatol, "fatol": hyper.fatol, "maxfev": hyper.max_evaluations})

    if not cache:
        raise ConvergenceError("Every hyperparameter evaluation failed; check the data scaling")
    best_key = min(cache, key=lambda k: cache[k].hyp_nll)
    fit = cache[best_key]
    if hyper.warm_start and opts.restarts_for(specs) > 1:
        # random restarts at the optimum, keeping the warm-started fit if it stays best
        fresh = fit_map(Y_set, records, q, fit.specs, priors, opts, (fit.latent, fit.wphm))
        state["iterations"] += fresh.inner_iterations
        if fresh.hyp_nll <= fit.hyp_nll:
            fit = fresh
    if not np.isfinite(fit.hyp_nll):
        logger.warning("No hyperparameter point produced a positive definite Hessian")
    return HyperOptResult(fit.specs, fit, trace, state["iterations"], len(cache))


@dataclass
class ScanRow:
    kernel: str
    q: int
    hyp_nll: float
    nll: float
    free_param_count: int
    converged: bool
    ratio_to_best: float = np.nan
    ratio_to_previous: float = np.nan


@dataclass
class ScanResult:
    rows: list
    q_star: dict
    fits: dict = field(default_factory=dict)

    @property
    def best_kernel(self):
        best = min(self.rows, key=lambda r: r.hyp_nll)
        return best.kernel

    def to_frame(self):
        frame = pd.DataFrame([vars(r) for r in self.rows])
        return frame.sort_values(["kernel", "q"]).reset_index(drop=True)


def scan_dimensionality(Y_set, records, q_range, specs, kernels=None, priors=PriorConfig(),
                        opts: FitOptions = FitOptions(), hyper: HyperOptions = HyperOptions()) -> ScanResult:
    """Optimized hyper-NLL for every (kernel, q) pair and the minimizing q per kernel.

    The ratios are exp(N (L_hyp(q) - L_hyp(q_ref))), so values above one favour q_ref.
    """
    Y_set = [np.asarray(Y, dtype=float) for Y in Y_set]
    n = Y_set[0].shape[0]
    max_q = min(Y.shape[1] for Y in Y_set) - 1
    q_range = sorted(set(int(q) for q in q_range))
    if not q_range or q_range[0] < 1 or q_range[-1] > max_q:
        raise InputError(f"q range must lie within [1, {max_q}], got {q_range}")
    families = [KernelFamily.parse(k) for k in kernels] if kernels else [specs[0].family]

    jobs = []
    for family in families:
        family_specs = [KernelSpec(family, s.sigma, s.lengthscale, s.noise_var) for s in specs]
        jobs += [(family, q, family_specs) for q in q_range]

    def run(job):
        family, q, job_specs = job
        logger.info(f"Scanning kernel={family.value} q={q}")
        return optimize_hyperparameters(Y_set, records, q, job_specs, priors, opts.replace(workers=1), hyper).fit

    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            fits = list(pool.map(run, jobs))
    else:
        fits = [run(job) for job in jobs]

    rows, q_star, by_key = [], {}, {}
    for (family, q, _), fit in zip(jobs, fits):
        by_key[(family.value, q)] = fit
        rows.append(ScanRow(family.value, q, fit.hyp_nll, fit.nll, fit.free_param_count, fit.converged))
    for family in families:
        family_rows = [r for r in rows if r.kernel == family.value]
        best = min(family_rows, key=lambda r: r.hyp_nll)
        q_star[family.value] = best.q
        previous = None
        for row in family_rows:
            with np.errstate(over="ignore", invalid="ignore"):
                row.ratio_to_best = float(np.exp(n * (row.hyp_nll - best.hyp_nll)))
                if previous is not None:
                    row.ratio_to_previous = float(np.exp(n * (row.hyp_nll - previous.hyp_nll)))
            previous = row
    return ScanResult(rows, q_star, by_key)
