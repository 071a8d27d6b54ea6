"""Simulation studies: retrieval accuracy, supervision and multi-source benefit,
prediction error against dimension, noise and censoring, non-linear manifold
recovery and latent-dimension detection."""
import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import InputError
from .evaluation import ModelOptions, fit_predict, log_rank, mse_event_times, split_risk_groups
from .kernels import KernelSpec
from .model import FitOptions, HyperOptions, optimize_hyperparameters, scan_dimensionality
from .prediction import ProjectionOptions
from .synth import SimulationConfig, SourceDesign, misalignment_errors, simulate
from .utils import Standardizer
from .wphm import PriorConfig, fit_wphm

logger = logging.getLogger(__name__)

PRESETS = {
    "retrieval": dict(sources=(SourceDesign(10, KernelSpec("linear", noise_var=0.1)),), latent="pattern"),
    "scan": dict(sources=(SourceDesign(10, KernelSpec("linear", noise_var=0.01)),), latent="pattern"),
    "manifold": dict(sources=(SourceDesign(2, KernelSpec("se", sigma=1.0, lengthscale=1.0, noise_var=0.001)),),
                     latent="uniform", n=100, q=1, b=(-1.0,), rho=10.0, nu=10.0),
    "mse": dict(sources=(SourceDesign(25, KernelSpec("linear", noise_var=0.01)),), latent="gaussian", n=200, q=2),
}


def preset_config(name, seed=0, **overrides):
    if name not in PRESETS:
        raise InputError(f"Unknown preset '{name}'. Use one of: {', '.join(PRESETS)}")
    settings = dict(PRESETS[name])
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return SimulationConfig(seed=seed, **settings)


@dataclass(frozen=True)
class StudyOptions:
    fit: FitOptions = FitOptions()
    hyper: HyperOptions = HyperOptions()
    priors: PriorConfig = PriorConfig()
    projection: ProjectionOptions = ProjectionOptions()
    workers: int = 1


def _over_seeds(fn, seeds, workers):
    seeds = list(seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(fn, seeds))
    else:
        rows = [fn(s) for s in seeds]
    return pd.DataFrame([r for group in rows for r in (group if isinstance(group, list) else [group])])


def _fit_latent(bundle, Y_set, q, opts: StudyOptions, use_survival=True, specs=None):
    Y_set = Standardizer.fit(Y_set).transform(Y_set)
    specs = list(specs or bundle.specs)
    fit_opts = opts.fit.replace(use_survival=use_survival, seed=bundle.seed, workers=1)
    return optimize_hyperparameters(Y_set, bundle.records, q, specs, opts.priors, fit_opts, opts.hyper).fit


def retrieval_accuracy(seeds, opts: StudyOptions = StudyOptions(), noise_var=0.1, d=10):
    """Misalignment errors of the fitted pattern, per seed."""
    def run(seed):
        source = SourceDesign(d, KernelSpec("linear", noise_var=noise_var))
        bundle = simulate(preset_config("retrieval", seed, sources=(source,)))
        fit = _fit_latent(bundle, bundle.Y_set, 2, opts)
        errors = misalignment_errors(fit.X, bundle.assignment)
        return {"seed": seed, **errors._asdict(), "hyp_nll": fit.hyp_nll, "converged": fit.converged}
    return _over_seeds(run, seeds, opts.workers)


def supervision_benefit(seeds, opts: StudyOptions = StudyOptions(), beta=0.5, d=10):
    """Misalignment errors with and without the survival term on the same data."""
    def run(seed):
        source = SourceDesign(d, KernelSpec("linear", noise_var=beta**2))
        bundle = simulate(preset_config("retrieval", seed, sources=(source,)))
        rows = []
        for model, use_survival in (("gplvm-wphm", True), ("gplvm", False)):
            fit = _fit_latent(bundle, bundle.Y_set, 2, opts, use_survival)
            rows.append({"seed": seed, "model": model, **misalignment_errors(fit.X, bundle.assignment)._asdict()})
        return rows
    return _over_seeds(run, seeds, opts.workers)


def multi_source_benefit(seeds, opts: StudyOptions = StudyOptions(), designs=((10, 0.1), (100, 1.0))):
    """Misalignment errors from each source alone and from all sources together."""
    def run(seed):
        sources = tuple(SourceDesign(d, KernelSpec("linear", noise_var=v)) for d, v in designs)
        bundle = simulate(preset_config("retrieval", seed, sources=sources))
        rows = []
        for s in range(len(sources)):
            fit = _fit_latent(bundle, [bundle.Y_set[s]], 2, opts, specs=[bundle.specs[s]])
            rows.append({"seed": seed, "sources": f"Y{s + 1}", **misalignment_errors(fit.X, bundle.assignment)._asdict()})
        fit = _fit_latent(bundle, bundle.Y_set, 2, opts)
        rows.append({"seed": seed, "sources": "all", **misalignment_errors(fit.X, bundle.assignment)._asdict()})
        return rows
    return _over_seeds(run, seeds, opts.workers)


def _mse_pair(config, opts: StudyOptions):
    """Test-set MSE of event-time predictions from the latent model and from a WPHM on the covariates."""
    bundle = simulate(config)
    n = len(bundle.records)
    order = np.random.default_rng(config.seed).permutation(n)
    train, test = np.sort(order[: n // 2]), np.sort(order[n // 2:])
    Y_train = [Y[train] for Y in bundle.Y_set]
    Y_test = [Y[test] for Y in bundle.Y_set]
    out = {}
    for space in ("latent", "observed"):
        model_opts = ModelOptions(q=config.q, specs=tuple(bundle.specs), priors=opts.priors,
                                  fit=opts.fit.replace(seed=config.seed, workers=1), hyper=opts.hyper,
                                  projection=opts.projection, space=space)
        prediction = fit_predict(Y_train, bundle.records.subset(train), Y_test, model_opts)
        out[space] = mse_event_times(prediction.mean_time, bundle.records.subset(test))
    out["change_pct"] = 100 * (out["observed"] - out["latent"]) / out["latent"]
    return out


def mse_by_dimension(seeds, opts: StudyOptions = StudyOptions(), dims=(10, 25, 50, 100), noise_var=0.01,
                     censor_frac=0.1):
    def run(seed):
        rows = []
        for d in dims:
            source = SourceDesign(d, KernelSpec("linear", noise_var=noise_var))
            config = preset_config("mse", seed, sources=(source,), censor_frac=censor_frac)
            rows.append({"seed": seed, "d": d, **_mse_pair(config, opts)})
        return rows
    return _over_seeds(run, seeds, opts.workers)


def mse_by_noise(seeds, opts: StudyOptions = StudyOptions(), betas=(0.01, 0.1, 0.5, 1.0), d=10):
    def run(seed):
        rows = []
        for beta in betas:
            source = SourceDesign(d, KernelSpec("linear", noise_var=beta**2))
            rows.append({"seed": seed, "beta": beta, **_mse_pair(preset_config("mse", seed, sources=(source,)), opts)})
        return rows
    return _over_seeds(run, seeds, opts.workers)


def mse_by_censoring(seeds, opts: StudyOptions = StudyOptions(), fractions=(0.10, 0.25, 0.50, 0.75), d=25, beta=1.0):
    def run(seed):
        rows = []
        for p in fractions:
            source = SourceDesign(d, KernelSpec("linear", noise_var=beta**2))
            config = preset_config("mse", seed, sources=(source,), censor_frac=p)
            rows.append({"seed": seed, "censor_frac": p, **_mse_pair(config, opts)})
        return rows
    return _over_seeds(run, seeds, opts.workers)


def manifold_recovery(seeds, opts: StudyOptions = StudyOptions()):
    """Log-rank separation of risk groups in the latent and the observed space, plus recovered hyperparameters."""
    def run(seed):
        bundle = simulate(preset_config("manifold", seed))
        fit_opts = opts.fit.replace(seed=seed, workers=1)
        fit = optimize_hyperparameters(bundle.Y_set, bundle.records, 1, bundle.specs, opts.priors,
                                       fit_opts, opts.hyper).fit
        high, low = split_risk_groups(fit.risk_scores())
        latent = log_rank(bundle.records.subset(high), bundle.records.subset(low))

        Z = np.hstack(bundle.Y_set)
        params, _ = fit_wphm(bundle.records, Z, opts.priors)
        high, low = split_risk_groups(Z @ params.b)
        observed = log_rank(bundle.records.subset(high), bundle.records.subset(low))
        spec = fit.specs[0]
        return {
            "seed": seed,
            "latent_p": latent.p_value,
            "observed_p": observed.p_value,
            "noise_var": spec.noise_var,
            "sigma": spec.sigma,
            "lengthscale": spec.lengthscale,
            "b": float(fit.wphm.b[0]),
            "rho": fit.wphm.rho,
            "nu": fit.wphm.nu,
        }
    return _over_seeds(run, seeds, opts.workers)


def dimension_detection(seeds, opts: StudyOptions = StudyOptions(), q_range=(1, 2, 3, 4), kernels=("linear", "poly2")):
    """Scan q for each kernel on pattern data and report the detected dimension."""
    def run(seed):
        bundle = simulate(preset_config("scan", seed))
        Y_set = Standardizer.fit(bundle.Y_set).transform(bundle.Y_set)
        result = scan_dimensionality(Y_set, bundle.records, q_range, bundle.specs, kernels, opts.priors,
                                     opts.fit.replace(seed=seed, workers=1), opts.hyper)
        frame = result.to_frame()
        rows = []
        for kernel in kernels:
            best = frame[(frame.kernel == KernelSpec(kernel).family.value)]
            q_star = result.q_star[KernelSpec(kernel).family.value]
            rows.append({"seed": seed, "kernel": best.kernel.iloc[0], "q_star": q_star,
                         "hyp_nll_at_q_star": float(best[best.q == q_star].hyp_nll.iloc[0])})
        return rows
    return _over_seeds(run, seeds, opts.workers)


STUDIES = {
    "retrieval": retrieval_accuracy,
    "supervision": supervision_benefit,
    "multi_source": multi_source_benefit,
    "mse_dimension": mse_by_dimension,
    "mse_noise": mse_by_noise,
    "mse_censoring": mse_by_censoring,
    "manifold": manifold_recovery,
    "scan": dimension_detection,
}
