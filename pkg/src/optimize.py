import logging

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt

from .errors import InputError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimOptions:
    max_iterations: int = 1000
    gtol: float = 1e-6
    ftol: float = 1e-15
    memory: int = 20
    max_linesearch: int = 40
    trace: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if not self.gtol > 0 or not self.ftol > 0:
            raise InputError("Optimizer tolerances must be positive")
        if self.memory < 1 or self.max_linesearch < 1:
            raise InputError("memory and max_linesearch must be at least 1")


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str = ""
    evaluations: int = 0
    trace: list = field(default_factory=list)


class _Objective:
    """Wraps a value-and-gradient callable, rejecting non-finite evaluations."""

    def __init__(self, fun):
        self.fun = fun
        self.evaluations = 0
        self.best = None

    def __call__(self, x):
        self.evaluations += 1
        value, grad = self.fun(x)
        value = float(value)
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"Objective returned a non-finite value or gradient at x={np.array2string(x, precision=6)}")
        if self.best is None or value < self.best[1]:
            self.best = (x.copy(), value, grad.copy())
        return value, grad


def minimize(objective, x0, opts: OptimOptions = OptimOptions()) -> OptimResult:
    """Limited-memory quasi-Newton minimization of a value-and-gradient callable.

    Convergence is declared when the gradient max-norm is at most opts.gtol.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size == 0:
        value, _ = objective(x0)
        return OptimResult(x0, float(value), 0.0, 0, True, "no free parameters", 1)

    wrapped = _Objective(objective)
    value0, _ = wrapped(x0)
    trace = [value0] if opts.trace else []

    def record(xk):
        if opts.trace:
            trace.append(wrapped.best[1])

    res = sopt.minimize(
        wrapped, x0, jac=True, method="L-BFGS-B", callback=record,
        options={
            "maxiter": opts.max_iterations,
            "gtol": opts.gtol,
            "ftol": opts.ftol,
            "maxcor": opts.memory,
            "maxls": opts.max_linesearch,
        },
    )
    # line searches may end on a worse point than one already visited
    x, value, grad = wrapped.best
    grad_norm = float(np.max(np.abs(grad)))
    converged = grad_norm <= opts.gtol
    if not converged:
        logger.debug(f"L-BFGS stopped with gradient norm {grad_norm:.3g}: {res.message}")
    return OptimResult(
        x=x,
        value=value,
        grad_norm=grad_norm,
        iterations=int(res.nit),
        converged=converged,
        message=str(res.message),
        evaluations=wrapped.evaluations,
        trace=trace,
    )


def finite_diff_gradient(fun, x, step=1e-6):
    """Central differences of a scalar function."""
    if step <= 0:
        raise InputError(f"Finite-difference step must be positive, got {step}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fun(xp) - fun(xm)) / (2 * h)
    return grad


def finite_diff_jacobian(grad_fun, x, step=1e-6):
    """Central differences of a vector-valued function; used to check Hessians."""
    x = np.asarray(x, dtype=float).ravel()
    columns = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        columns.append((np.ravel(grad_fun(xp)) - np.ravel(grad_fun(xm))) / (2 * h))
    return np.column_stack(columns)


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_diff_check(objective, x, step=1e-6):
    """Worst-coordinate relative error between the analytic and central-difference gradients.

    The error of each coordinate is scaled by the largest gradient magnitude so near-zero
    components do not dominate.
    """
    x = np.asarray(x, dtype=float)
    _, analytic = objective(x)
    numeric = finite_diff_gradient(lambda z: objective(z)[0], x, step)
    return relative_error(analytic, numeric)
