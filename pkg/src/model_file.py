"""Plain-text, versioned model files.

One key=value pair per line; matrices are stored row-major as comma-separated
floats with 17 significant digits so a load reproduces the fit exactly.
"""
import logging

from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import InputError
from .kernels import KernelSpec
from .model import LatentState, ModelFit
from .utils import Standardizer, atomic_write_text
from .wphm import PriorConfig, SurvivalData, WphmParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER = "# gplvm-wphm model"


@dataclass
class SavedModel:
    fit: ModelFit
    scaler: Standardizer
    source_names: list
    columns: list
    fingerprint: str
    tool_version: str = __version__


def _floats(values):
    return ",".join(format(float(v), ".17g") for v in np.ravel(values))


def _parse_floats(text):
    return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)


def dumps(saved: SavedModel) -> str:
    fit = saved.fit
    lines = [
        HEADER,
        f"format_version={FORMAT_VERSION}",
        f"tool_version={saved.tool_version}",
        f"fingerprint={saved.fingerprint}",
        f"seed={fit.seed}",
        f"n={fit.n}",
        f"q={fit.q}",
        f"sources={len(fit.specs)}",
        f"use_survival={int(fit.use_survival)}",
    ]
    for s, (spec, Y) in enumerate(zip(fit.specs, fit.Y_set), start=1):
        lines += [
            f"source{s}.name={saved.source_names[s - 1]}",
            f"source{s}.columns={','.join(saved.columns[s - 1])}",
            f"source{s}.kernel={spec.family.value}",
            f"source{s}.sigma={format(spec.sigma, '.17g')}",
            f"source{s}.lengthscale={format(spec.lengthscale, '.17g')}",
            f"source{s}.noise_var={format(spec.noise_var, '.17g')}",
            f"source{s}.mean={_floats(saved.scaler.means[s - 1])}",
            f"source{s}.scale={_floats(saved.scaler.scales[s - 1])}",
            f"source{s}.Y={_floats(Y)}",
        ]
    p = fit.priors
    lines += [f"priors.{k}={format(getattr(p, k), '.17g')}"
              for k in ("kappa0", "alpha0", "kappa1", "alpha1", "sigma0", "sigma1")]
    lines.append(f"priors.enabled={int(p.enabled)}")
    lines.append(f"X={_floats(fit.X)}")
    if fit.use_survival:
        w = fit.wphm
        lines += [
            f"b={_floats(w.b)}",
            f"rho={format(w.rho, '.17g')}",
            f"nu={format(w.nu, '.17g')}",
            f"rho_lb={format(w.rho_lb, '.17g')}",
            f"nu_lb={format(w.nu_lb, '.17g')}",
        ]
    if fit.survival is not None:
        lines += [f"times={_floats(fit.survival.times)}", f"events={','.join(str(e) for e in fit.survival.events)}"]
    lines += [
        f"nll={format(fit.nll, '.17g')}",
        f"hyp_nll={format(fit.hyp_nll, '.17g')}",
        f"hessian_logdet={format(fit.hessian_logdet, '.17g')}",
        f"free_param_count={fit.free_param_count}",
        f"converged={int(fit.converged)}",
        f"restarts_used={fit.restarts_used}",
    ]
    return "\n".join(lines) + "\n"


def save_model(filename, saved: SavedModel):
    atomic_write_text(filename, dumps(saved))


def _parse(text, filename):
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{filename}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def loads(text, filename="model") -> SavedModel:
    v = _parse(text, filename)
    if v.get("format_version") != str(FORMAT_VERSION):
        raise InputError(f"{filename}: unsupported model format version {v.get('format_version')}")
    try:
        n, q, n_sources = int(v["n"]), int(v["q"]), int(v["sources"])
        use_survival = v["use_survival"] == "1"

        specs, Y_set, names, columns, means, scales = [], [], [], [], [], []
        for s in range(1, n_sources + 1):
            key = f"source{s}."
            specs.append(KernelSpec(v[key + "kernel"], float(v[key + "sigma"]), float(v[key + "lengthscale"]),
                                    float(v[key + "noise_var"])))
            names.append(v[key + "name"])
            columns.append(v[key + "columns"].split(","))
            means.append(_parse_floats(v[key + "mean"]))
            scales.append(_parse_floats(v[key + "scale"]))
            Y_set.append(_parse_floats(v[key + "Y"]).reshape(n, len(columns[-1])))

        priors = PriorConfig(*(float(v[f"priors.{k}"]) for k in ("kappa0", "alpha0", "kappa1", "alpha1",
                                                                 "sigma0", "sigma1")),
                             enabled=v["priors.enabled"] == "1")
        latent = LatentState(_parse_floats(v["X"]).reshape(n, q))
        wphm = None
        if use_survival:
            wphm = WphmParams(_parse_floats(v["b"]), float(v["rho"]), float(v["nu"]),
                              float(v["rho_lb"]), float(v["nu_lb"]))
        survival = None
        if "times" in v:
            survival = SurvivalData(_parse_floats(v["times"]), [int(e) for e in v["events"].split(",")])

        fit = ModelFit(
            latent=latent,
            wphm=wphm,
            specs=specs,
            priors=priors,
            Y_set=Y_set,
            survival=survival,
            nll=float(v["nll"]),
            hyp_nll=float(v["hyp_nll"]),
            free_param_count=int(v["free_param_count"]),
            hessian_logdet=float(v["hessian_logdet"]),
            converged=v["converged"] == "1",
            restarts_used=int(v["restarts_used"]),
            seed=int(v["seed"]),
        )
    except KeyError as e:
        raise InputError(f"{filename}: missing key {e}") from None
    except ValueError as e:
        raise InputError(f"{filename}: malformed value: {e}") from None
    return SavedModel(fit, Standardizer(means, scales), names, columns, v["fingerprint"], v["tool_version"])


def load_model(filename) -> SavedModel:
    try:
        with open(filename, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise InputError(f"Could not read model file {filename}: {e}") from None
    if not text.startswith(HEADER):
        raise InputError(f"{filename} is not a gplvm-wphm model file")
    return loads(text, filename)
