import logging

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import orthogonal_procrustes

from .errors import InputError
from .kernels import KernelSpec, kernel_matrix
from .wphm import SurvivalData, WphmParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatternSpec:
    """Two concentric circles and two lines through the origin."""
    outer_count: int = 20
    outer_radius: float = 2.0
    inner_count: int = 16
    inner_radius: float = 1.0
    line_count: int = 30
    line_half_length: float = 2.0
    slopes: tuple = (1.0, -1.0)

    def __post_init__(self):
        if self.outer_count < 3 or self.inner_count < 3:
            raise InputError("Each circle needs at least 3 points")
        if self.line_count < 2:
            raise InputError("Each line needs at least 2 points")
        if self.outer_radius <= 0 or self.inner_radius <= 0 or self.line_half_length <= 0:
            raise InputError("Radii and line lengths must be positive")

    @property
    def n(self):
        return self.outer_count + self.inner_count + self.line_count * len(self.slopes)


@dataclass(frozen=True)
class PatternComponent:
    kind: str
    index: np.ndarray


@dataclass(frozen=True)
class PatternAssignment:
    """Which rows of a latent matrix belong to which pattern component, plus the reference layout."""
    components: tuple
    reference: np.ndarray

    def circles(self):
        return [c for c in self.components if c.kind == "circle"]

    def lines(self):
        return [c for c in self.components if c.kind == "line"]


class MisalignmentErrors(NamedTuple):
    radial: float
    angular: float
    linear: float


def _circle(count, radius):
    angles = 2 * np.pi * np.arange(count) / count
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def _line(count, half_length, slope):
    direction = np.array([1.0, slope]) / np.hypot(1.0, slope)
    return np.linspace(-half_length, half_length, count)[:, None] * direction[None, :]


def make_pattern(spec: PatternSpec = PatternSpec()):
    parts = [_circle(spec.outer_count, spec.outer_radius), _circle(spec.inner_count, spec.inner_radius)]
    parts += [_line(spec.line_count, spec.line_half_length, slope) for slope in spec.slopes]
    return np.vstack(parts)


def pattern_assignment(spec: PatternSpec = PatternSpec()) -> PatternAssignment:
    sizes = [("circle", spec.outer_count), ("circle", spec.inner_count)]
    sizes += [("line", spec.line_count)] * len(spec.slopes)
    components, start = [], 0
    for kind, count in sizes:
        components.append(PatternComponent(kind, np.arange(start, start + count)))
        start += count
    return PatternAssignment(tuple(components), make_pattern(spec))


def _align(X_hat, reference):
    R, _ = orthogonal_procrustes(X_hat, reference)
    return X_hat @ R


def misalignment_errors(X_hat, assignment: PatternAssignment) -> MisalignmentErrors:
    """Radial, angular and linear discrepancies of an estimated pattern.

    All three vanish on the reference layout and do not change under rotation,
    reflection or uniform rescaling of X_hat.
    """
    X_hat = np.asarray(X_hat, dtype=float)
    if X_hat.ndim != 2 or X_hat.shape[1] != 2:
        raise InputError(f"Misalignment errors need an N x 2 latent matrix, got shape {X_hat.shape}")
    if len(X_hat) != len(assignment.reference):
        raise InputError(f"Latent matrix has {len(X_hat)} rows, the pattern has {len(assignment.reference)}")

    radial, angular = [], []
    for circle in assignment.circles():
        pts = X_hat[circle.index]
        r = np.linalg.norm(pts, axis=1)
        r_mean = r.mean()
        if r_mean <= 0:
            raise InputError("Degenerate circle: mean radius is zero")
        radial.append(np.mean(np.abs(r - r_mean) / r_mean))

        theta = np.arctan2(pts[:, 1], pts[:, 0])
        gaps = np.abs(np.angle(np.exp(1j * (np.roll(theta, -1) - theta))))
        nominal = 2 * np.pi / len(pts)
        angular.append(np.mean(np.abs(gaps - nominal) / nominal))

    aligned = _align(X_hat, assignment.reference)
    linear = []
    for line in assignment.lines():
        x1, x2 = aligned[line.index, 0], aligned[line.index, 1]
        slope = np.sum(x1 * x2) / np.sum(x1**2)
        ss_err = np.sum((x2 - slope * x1) ** 2)
        ss_tot = np.sum((x2 - x2.mean()) ** 2)
        linear.append(ss_err / ss_tot)

    return MisalignmentErrors(float(np.mean(radial)), float(np.mean(angular)), float(np.mean(linear)))


def sample_observations(X, spec: KernelSpec, d, rng):
    """d independent columns drawn from N(0, K(X) + noise)."""
    if d < 1:
        raise InputError(f"Observed dimension must be at least 1, got {d}")
    km = kernel_matrix(X, spec)
    L = np.tril(km.chol[0])
    return L @ rng.standard_normal((L.shape[0], d))


def sample_survival(X, b, rho, nu, rng, z=None):
    """Event times by inverting C(t) = 1 - exp(-(t/rho)^nu exp(b.x))."""
    if rho <= 0 or nu <= 0:
        raise InputError("Weibull scale and shape must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    score = X @ np.atleast_1d(np.asarray(b, dtype=float))
    if z is None:
        z = rng.random(len(X))
    z = np.asarray(z, dtype=float)
    return rho * (-np.exp(-score) * np.log1p(-z)) ** (1 / nu)


def censor_count(fraction, n):
    return int(np.floor(fraction * n + 0.5))


def apply_censoring(times, fraction, rng) -> SurvivalData:
    """Censor a random subset at a time drawn uniformly below the event time."""
    if not 0 <= fraction < 1:
        raise InputError(f"Censoring fraction must lie in [0, 1), got {fraction}")
    times = np.asarray(times, dtype=float).copy()
    events = np.ones(len(times), dtype=int)
    count = censor_count(fraction, len(times))
    if count:
        chosen = np.sort(rng.choice(len(times), size=count, replace=False))
        times[chosen] *= rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=count)
        events[chosen] = 0
    return SurvivalData(times, events)


@dataclass(frozen=True)
class SourceDesign:
    d: int
    spec: KernelSpec


@dataclass(frozen=True)
class SimulationConfig:
    """How to generate one synthetic cohort."""
    sources: tuple = (SourceDesign(10, KernelSpec("linear", noise_var=0.1)),)
    latent: str = "pattern"
    n: int = 96
    q: int = 2
    pattern: PatternSpec = PatternSpec()
    b: tuple = (1.0, -0.5)
    rho: float = 10.0
    nu: float = 10.0
    censor_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.latent not in ("pattern", "gaussian", "uniform"):
            raise InputError(f"Unknown latent layout '{self.latent}'")
        if not self.sources:
            raise InputError("At least one data source must be simulated")
        if len(self.b) != self.latent_dim:
            raise InputError(f"b has {len(self.b)} entries but the latent dimension is {self.latent_dim}")

    @property
    def latent_dim(self):
        return 2 if self.latent == "pattern" else self.q

    @property
    def size(self):
        return self.pattern.n if self.latent == "pattern" else self.n


@dataclass
class SyntheticBundle:
    X_true: np.ndarray
    Y_set: list
    records: SurvivalData
    event_times: np.ndarray
    specs: list
    wphm: WphmParams
    seed: int
    assignment: PatternAssignment = None
    config: SimulationConfig = field(default=None, repr=False)


def simulate(config: SimulationConfig) -> SyntheticBundle:
    """Latents, then each observed source, then event times, then censoring, each from its own stream."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3 + len(config.sources))]
    latent_rng, survival_rng, censor_rng, *source_rngs = streams

    assignment = None
    if config.latent == "pattern":
        X = make_pattern(config.pattern)
        assignment = pattern_assignment(config.pattern)
    elif config.latent == "gaussian":
        X = latent_rng.standard_normal((config.n, config.q))
    else:
        X = latent_rng.uniform(-2.0, 2.0, size=(config.n, config.q))

    Y_set = [sample_observations(X, src.spec, src.d, rng) for src, rng in zip(config.sources, source_rngs)]
    times = sample_survival(X, config.b, config.rho, config.nu, survival_rng)
    records = apply_censoring(times, config.censor_frac, censor_rng)
    return SyntheticBundle(
        X_true=X,
        Y_set=Y_set,
        records=records,
        event_times=times,
        specs=[src.spec for src in config.sources],
        wphm=WphmParams(np.asarray(config.b, dtype=float), config.rho, config.nu),
        seed=config.seed,
        assignment=assignment,
        config=config,
    )
