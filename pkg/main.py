import io
import os
import sys
import json
import logging
import argparse

from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

from src import __version__
from src.errors import InputError, NumericalError
from src.evaluation import (ModelOptions, concordance, kaplan_meier, kfold_cv, log_rank,
                            mse_event_times, split_risk_groups)
from src.experiments import PRESETS, STUDIES, StudyOptions, preset_config
from src.kernels import KernelSpec
from src.model import FitOptions, HyperOptions, optimize_hyperparameters, scan_dimensionality
from src.model_file import SavedModel, load_model, save_model
from src.prediction import ProjectionOptions, predict_batch
from src.synth import SourceDesign, simulate
from src.utils import (Standardizer, atomic_write_text, dataset_frame, dotdict, fingerprint, read_config,
                       read_dataset, write_table)
from src.wphm import PriorConfig, SurvivalData

logging.basicConfig(level=logging.WARNING, format='%(levelname)s: %(message)s')

EXIT_CODES = {"success": 0, "error": 2, "numerical_error": 3, "developer_error": 1}

DEFAULTS = dotdict(
    q=2, q_min=1, q_max=None, kernel=None, seed=0, restarts=None, folds=8, censor_frac=None,
    metric="harrell", no_survival=False, rho_lb=0.0, nu_lb=0.0, max_outer=100, tol_outer=1e-6, gtol=1e-6,
    kappa0=3.0, alpha0=1.0, kappa1=3.0, alpha1=6.0, sigma0=2.0, sigma1=2.0,
    noise_var=[0.1], sigma=[1.0], lengthscale=[1.0], d=None, n=None, b=None, rho=None, nu=None, latent=None,
    preset="retrieval", workers=1, optimize_hyper=True, standardize=True, starts=10,
)


def get_args(argv=None):
    parser = argparse.ArgumentParser(description="Fit and evaluate the GPLVM-WPHM latent survival model")
    parser.add_argument("--rpc", action="store_true", help="Read JSON requests line by line from stdin")
    parser.add_argument("--verbose", action="store_true", help="Log progress at INFO level")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Flat key=value config file; command line flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="Threads for restarts, folds and scans")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--q", type=int, help="Latent dimension")
    model.add_argument("--kernel", type=str, help="linear, poly2 or se; comma separated for one kernel per source")
    model.add_argument("--restarts", type=int, help="Random restarts (default 1 for linear, 5 otherwise)")
    model.add_argument("--no-survival", dest="no_survival", action="store_true", default=None,
                       help="Fit the plain GPLVM without the survival term")
    model.add_argument("--no-hyper", dest="optimize_hyper", action="store_false", default=None,
                       help="Keep the kernel hyperparameters fixed")

    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("simulate", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--preset", type=str, help=f"One of: {', '.join(PRESETS)}")
    p.add_argument("--censor-frac", dest="censor_frac", type=float)
    p.add_argument("--out", type=str, required=True, help="Dataset CSV to write")
    p.add_argument("--truth", type=str, help="Truth sidecar file (default: <out>.truth)")

    p = sub.add_parser("fit", parents=[common, model], help="Fit a model to a dataset")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="Model file to write")
    p.add_argument("--init", type=str, help="Model file to warm start from")

    p = sub.add_parser("scan", parents=[common, model], help="Compare latent dimensions by hyper-NLL")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--q-min", dest="q_min", type=int)
    p.add_argument("--q-max", dest="q_max", type=int)
    p.add_argument("--out", type=str, required=True, help="Scan table CSV to write")

    p = sub.add_parser("predict", parents=[common], help="Project new individuals and predict event times")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("evaluate", parents=[common, model], help="Metrics, risk groups, cross-validation, studies")
    p.add_argument("--data", type=str)
    p.add_argument("--model", type=str)
    p.add_argument("--folds", type=int)
    p.add_argument("--metric", type=str, choices=["harrell", "uno", "mse"])
    p.add_argument("--study", type=str, help=f"Simulation study: {', '.join(STUDIES)}")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--km-out", dest="km_out", type=str, help="Kaplan-Meier curve CSV for the risk groups")
    p.add_argument("--out", type=str, required=True)

    args = parser.parse_args(argv)
    if not args.rpc and not args.command:
        parser.error("a command is required unless --rpc is given")
    return args


def assert_file_valid(file_path):
    if not file_path:
        raise InputError("Missing required parameters")

    if not os.path.exists(file_path):
        raise InputError(
            f"File not found: {file_path}\n"
            f"System Encodings:\n"
            f"  - Default: {sys.getdefaultencoding()}\n"
            f"  - Filesystem: {sys.getfilesystemencoding()}\n"
        )


def assert_out_valid(file_path):
    if not file_path:
        raise InputError("Missing output path")
    directory = os.path.dirname(os.path.abspath(file_path))
    if not os.path.isdir(directory):
        raise InputError(f"Output directory does not exist: {directory}")


@dataclass
class Options:
    """Option fields shared by every request; None means not given."""
    config: str = None
    seed: int = None
    workers: int = None

    def settings(self):
        """Defaults, then the config file, then explicitly given fields."""
        merged = DEFAULTS.copy()
        if self.config:
            assert_file_valid(self.config)
            merged.update(read_config(self.config))
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in DEFAULTS and value is not None:
                merged[f.name] = _coerce(f.name, value)
        return merged


def _coerce(key, value):
    if key == "kernel" and isinstance(value, str):
        return [k.strip() for k in value.split(",") if k.strip()]
    return value


@dataclass
class SimulateRequest(Options):
    out: str = None
    preset: str = None
    censor_frac: float = None
    truth: str = None

    def __post_init__(self):
        assert_out_valid(self.out)


@dataclass
class ModelRequest(Options):
    q: int = None
    kernel: str = None
    restarts: int = None
    no_survival: bool = None
    optimize_hyper: bool = None


@dataclass
class FitRequest(ModelRequest):
    data: str = None
    out: str = None
    init: str = None

    def __post_init__(self):
        assert_file_valid(self.data)
        assert_out_valid(self.out)
        if self.init:
            assert_file_valid(self.init)


@dataclass
class ScanRequest(ModelRequest):
    data: str = None
    out: str = None
    q_min: int = None
    q_max: int = None

    def __post_init__(self):
        assert_file_valid(self.data)
        assert_out_valid(self.out)


@dataclass
class PredictRequest(Options):
    model: str = None
    data: str = None
    out: str = None

    def __post_init__(self):
        assert_file_valid(self.model)
        assert_file_valid(self.data)
        assert_out_valid(self.out)


@dataclass
class EvaluateRequest(ModelRequest):
    data: str = None
    model: str = None
    out: str = None
    folds: int = None
    metric: str = None
    study: str = None
    replicates: int = None
    km_out: str = None

    def __post_init__(self):
        assert_out_valid(self.out)
        if self.study is None and self.data is None:
            raise InputError("evaluate needs --data (with or without --model) or --study")
        if self.study is not None and self.study not in STUDIES:
            raise InputError(f"Unknown study '{self.study}'. Use one of: {', '.join(STUDIES)}")
        for path in (self.data, self.model):
            if path:
                assert_file_valid(path)
        if self.km_out:
            assert_out_valid(self.km_out)


def priors_from(s):
    return PriorConfig(s.kappa0, s.alpha0, s.kappa1, s.alpha1, s.sigma0, s.sigma1)


def fit_options_from(s):
    return FitOptions(restarts=s.restarts, max_outer=s.max_outer, tol_outer=s.tol_outer, gtol=s.gtol,
                      rho_lb=s.rho_lb, nu_lb=s.nu_lb, use_survival=not s.no_survival, seed=s.seed,
                      workers=s.workers)


def hyper_options_from(s):
    return HyperOptions(optimize=bool(s.optimize_hyper))


def _per_source(values, n_sources, name):
    values = list(values)
    if len(values) == 1:
        return values * n_sources
    if len(values) != n_sources:
        raise InputError(f"'{name}' has {len(values)} entries for {n_sources} sources")
    return values


def specs_from(s, n_sources):
    kernels = _per_source(s.kernel or ["linear"], n_sources, "kernel")
    noise = _per_source(s.noise_var, n_sources, "noise_var")
    sigma = _per_source(s.sigma, n_sources, "sigma")
    lengthscale = _per_source(s.lengthscale, n_sources, "lengthscale")
    return [KernelSpec(k, sg, ls, nv) for k, sg, ls, nv in zip(kernels, sigma, lengthscale, noise)]


def _truth_text(bundle):
    lines = [f"# gplvm-wphm {__version__} simulation truth", f"seed={bundle.seed}",
             f"n={bundle.X_true.shape[0]}", f"q={bundle.X_true.shape[1]}"]
    for k, spec in enumerate(bundle.specs, start=1):
        lines.append(f"source{k}=kernel:{spec.family.value} sigma:{spec.sigma!r} "
                     f"lengthscale:{spec.lengthscale!r} noise_var:{spec.noise_var!r}")
    lines.append("b=" + ",".join(format(v, ".17g") for v in bundle.wphm.b))
    lines.append(f"rho={bundle.wphm.rho!r}")
    lines.append(f"nu={bundle.wphm.nu!r}")
    lines.append("X_true=" + ",".join(format(v, ".17g") for v in bundle.X_true.ravel()))
    lines.append("event_times=" + ",".join(format(v, ".17g") for v in bundle.event_times))
    return "\n".join(lines) + "\n"


class TaskManager:
    def __init__(self, is_rpc=False):
        self.is_rpc = is_rpc
        self.warnings = []
        self.tasks = {
            "simulate": (self.simulate, SimulateRequest),
            "fit": (self.fit, FitRequest),
            "scan": (self.scan, ScanRequest),
            "predict": (self.predict, PredictRequest),
            "evaluate": (self.evaluate, EvaluateRequest),
        }

    def run(self, task, data):
        self.warnings = []
        response = {"task": task}
        if task not in self.tasks:
            response.update({"status": "developer_error", "message": f"Unknown task: {task}"})
            return response
        function, dataclass_type = self.tasks[task]
        try:
            request_data = dataclass_type(**data)
            response.update(function(request_data))
        except InputError as e:
            response.update({"status": "error", "message": str(e)})
        except NumericalError as e:
            response.update({"status": "numerical_error", "message": str(e)})
        except TypeError as e:
            response.update({"status": "developer_error", "message": f"Invalid parameters for {task}: {str(e)}"})
        if self.warnings:
            response["warnings"] = list(self.warnings)
        return response

    def process_request(self, request):
        task = request.get("task")
        data = request.get("data", {})
        response = self.run(task, data)
        print(json.dumps(response, ensure_ascii=False, default=str), flush=True)

    def simulate(self, data: SimulateRequest):
        s = data.settings()
        overrides = dict(n=s.n, rho=s.rho, nu=s.nu, latent=s.latent, censor_frac=s.censor_frac)
        if s.b is not None:
            overrides["b"] = tuple(s.b)
        if s.d is not None:
            base = preset_config(s.preset).sources
            n_sources = len(s.d)
            kernels = _per_source(s.kernel or [base[0].spec.family.value], n_sources, "kernel")
            noise = _per_source(s.noise_var, n_sources, "noise_var")
            overrides["sources"] = tuple(SourceDesign(d, KernelSpec(k, noise_var=v))
                                         for d, k, v in zip(s.d, kernels, noise))
        config = preset_config(s.preset, s.seed, **overrides)
        bundle = simulate(config)
        ids = [f"i{k + 1:04d}" for k in range(len(bundle.records))]
        frame = dataset_frame(ids, bundle.Y_set, times=bundle.records.times, events=bundle.records.events)
        write_table(frame, data.out, seed=s.seed, extra={"preset": s.preset})
        truth = data.truth or data.out + ".truth"
        atomic_write_text(truth, _truth_text(bundle))
        return {"status": "success", "message": f"Wrote {len(ids)} individuals to '{data.out}' and truth to '{truth}'",
                "n": len(ids), "censored": int(np.sum(bundle.records.events == 0))}

    def _training_data(self, path, s):
        dataset = read_dataset(path, require_survival=not s.no_survival)
        scaler = Standardizer.fit(dataset.Y_set) if s.standardize else Standardizer.identity(dataset.Y_set)
        records = SurvivalData(dataset.times, dataset.events) if dataset.has_survival else None
        return dataset, scaler, scaler.transform(dataset.Y_set), records

    def fit(self, data: FitRequest):
        s = data.settings()
        dataset, scaler, Y_set, records = self._training_data(data.data, s)
        specs = specs_from(s, len(Y_set))
        init = None
        if data.init:
            previous = load_model(data.init)
            init = (previous.fit.latent, previous.fit.wphm)
            specs = previous.fit.specs
        result = optimize_hyperparameters(Y_set, records, s.q, specs, priors_from(s), fit_options_from(s),
                                          hyper_options_from(s), init)
        fit = result.fit
        saved = SavedModel(fit, scaler, dataset.source_names, dataset.columns,
                           fingerprint(dataset.columns, dataset.Y_set, dataset.times, dataset.events))
        save_model(data.out, saved)
        response = {"status": "success", "message": f"{fit.summary()}\nModel saved as '{data.out}'",
                    "nll": fit.nll, "hyp_nll": fit.hyp_nll, "converged": fit.converged}
        if not fit.converged:
            self.log_warning("Fit did not converge; the model was saved but should not be trusted")
            response["status"] = "numerical_error"
        return response

    def scan(self, data: ScanRequest):
        s = data.settings()
        _, _, Y_set, records = self._training_data(data.data, s)
        q_max = s.q_max if s.q_max is not None else min(Y.shape[1] for Y in Y_set) - 1
        kernels = s.kernel or ["linear"]
        base = specs_from(dotdict(s, kernel=kernels[:1]), len(Y_set))
        result = scan_dimensionality(Y_set, records, range(s.q_min, q_max + 1), base,
                                     kernels, priors_from(s), fit_options_from(s), hyper_options_from(s))
        write_table(result.to_frame(), data.out, seed=s.seed)
        lines = [f"q*={q} for kernel {k}" for k, q in result.q_star.items()]
        return {"status": "success", "message": "\n".join(lines), "q_star": result.q_star}

    def predict(self, data: PredictRequest):
        s = data.settings()
        saved = load_model(data.model)
        dataset = read_dataset(data.data, require_survival=False, allow_missing_sources=True)
        if dataset.source_names != saved.source_names or dataset.columns != saved.columns:
            raise InputError(f"Columns of '{data.data}' do not match the model (fingerprint {saved.fingerprint})")
        rows = [saved.scaler.transform_row(row) for row in dataset.rows()]
        opts = ProjectionOptions(starts=s.starts, seed=s.seed, workers=s.workers)
        table = predict_batch(rows, saved.fit, opts, ids=dataset.ids)
        write_table(table, data.out, seed=s.seed, extra={"model": saved.fingerprint})
        return {"status": "success", "message": f"Wrote predictions for {len(table)} individuals to '{data.out}'"}

    def evaluate(self, data: EvaluateRequest):
        s = data.settings()
        if data.study:
            return self._study(data, s)
        if data.model:
            return self._evaluate_model(data, s)

        if s.no_survival:
            raise InputError("Cross-validation scores survival predictions; drop --no-survival")
        _, _, Y_set, records = self._training_data(data.data, s)
        model_opts = ModelOptions(q=s.q, specs=tuple(specs_from(s, len(Y_set))), priors=priors_from(s),
                                  fit=fit_options_from(s).replace(workers=1), hyper=hyper_options_from(s),
                                  projection=ProjectionOptions(starts=s.starts, seed=s.seed), standardize=False)
        report = kfold_cv(Y_set, records, s.folds, model_opts, s.metric, s.seed, s.workers)
        invalid = report.valid.count(False)
        if invalid:
            self.log_warning(f"{invalid} fold(s) had no comparable pairs and were excluded from the mean")
        write_table(report.to_frame(), data.out, seed=s.seed)
        return {"status": "success", "message": f"{s.folds}-fold {s.metric}: mean {report.mean:.4f}",
                "mean": report.mean}

    def _evaluate_model(self, data, s):
        saved = load_model(data.model)
        if not saved.fit.use_survival:
            raise InputError(f"Model '{data.model}' was fitted without the survival term; nothing to evaluate")
        dataset = read_dataset(data.data, require_survival=True)
        if dataset.columns != saved.columns:
            raise InputError(f"Columns of '{data.data}' do not match the model (fingerprint {saved.fingerprint})")
        records = SurvivalData(dataset.times, dataset.events)
        rows = [saved.scaler.transform_row(row) for row in dataset.rows()]
        table = predict_batch(rows, saved.fit, ProjectionOptions(starts=s.starts, seed=s.seed, workers=s.workers))
        risk = table["risk"].to_numpy()
        high, low = split_risk_groups(risk)
        test = log_rank(records.subset(high), records.subset(low))
        metrics = [("mse", mse_event_times(table["mean_time"].to_numpy(), records)),
                   ("harrell", concordance(risk, records, "harrell")),
                   ("uno", concordance(risk, records, "uno")),
                   ("logrank_chi2", test.chi_square),
                   ("logrank_p", test.p_value)]
        write_table(pd.DataFrame(metrics, columns=["metric", "value"]), data.out, seed=s.seed)
        if data.km_out:
            curves = pd.concat([kaplan_meier(records.subset(high)).to_frame("high"),
                                kaplan_meier(records.subset(low)).to_frame("low")])
            write_table(curves, data.km_out, seed=s.seed)
        return {"status": "success", "message": "\n".join(f"{k}={v:.6g}" for k, v in metrics)}

    def _study(self, data, s):
        replicates = data.replicates or 20
        seeds = range(s.seed, s.seed + replicates)
        opts = StudyOptions(fit=fit_options_from(s).replace(workers=1), hyper=hyper_options_from(s),
                            priors=priors_from(s), projection=ProjectionOptions(starts=s.starts),
                            workers=s.workers)
        frame = STUDIES[data.study](seeds, opts)
        write_table(frame, data.out, seed=s.seed, extra={"study": data.study})
        numeric = frame.drop(columns=["seed"]).select_dtypes("number")
        return {"status": "success",
                "message": f"Study '{data.study}' over {replicates} replicates\n{numeric.mean().to_string()}"}

    def log_warning(self, message):
        if self.is_rpc:
            self.warnings.append(message)
        logging.warning(message)


def request_fields(args):
    skip = {"command", "rpc", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv=None):
    args = get_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO)
    task_manager = TaskManager(args.rpc)

    if args.rpc:
        print("Python RPC mode ready", flush=True)

        sys.stdin = io.TextIOWrapper(sys.stdin.buffer, encoding='utf-8')
        sys.stdout.reconfigure(encoding='utf-8', line_buffering=True)
        sys.stderr.reconfigure(encoding='utf-8')

        for line in sys.stdin:
            if not line.strip():
                continue
            try:
                request = json.loads(line.strip())
                task_manager.process_request(request)
            except Exception as e:
                print(json.dumps({"status": "developer_error", "message": str(e)}, ensure_ascii=False), flush=True)
        return 0

    response = task_manager.run(args.command, request_fields(args))
    stream = sys.stdout if response["status"] == "success" else sys.stderr
    print(response.get("message", ""), file=stream)
    return EXIT_CODES.get(response["status"], 1)


if __name__ == "__main__":
    sys.exit(main())
