import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from lifelines import KaplanMeierFitter
from lifelines.statistics import logrank_test
from sklearn.model_selection import KFold

from .errors import InputError
from .kernels import KernelSpec
from .model import FitOptions, HyperOptions, optimize_hyperparameters
from .prediction import ProjectionOptions, event_time_moments, predict_batch
from .utils import Standardizer
from .wphm import PriorConfig, SurvivalData, fit_wphm

logger = logging.getLogger(__name__)

METRICS = ("harrell", "uno", "mse")


@dataclass
class KmCurve:
    time: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t):
        idx = np.searchsorted(self.time, t, side="right") - 1
        return np.where(idx < 0, 1.0, self.survival[np.maximum(idx, 0)])

    def to_frame(self, group=None):
        frame = pd.DataFrame({"time": self.time, "survival": self.survival,
                              "at_risk": self.at_risk, "events": self.events})
        if group is not None:
            frame.insert(0, "group", group)
        return frame


def kaplan_meier(records) -> KmCurve:
    data = SurvivalData.from_records(records)
    if len(data) == 0:
        raise InputError("Kaplan-Meier needs at least one record")
    kmf = KaplanMeierFitter()
    kmf.fit(durations=data.times, event_observed=data.events)
    table = kmf.event_table
    table = table[table["removed"] > 0]
    survival = kmf.survival_function_.loc[table.index].iloc[:, 0].to_numpy()
    return KmCurve(
        time=table.index.to_numpy(dtype=float),
        survival=survival,
        at_risk=table["at_risk"].to_numpy(dtype=int),
        events=table["observed"].to_numpy(dtype=int),
    )


class LogRankResult(NamedTuple):
    chi_square: float
    p_value: float


def log_rank(records_a, records_b) -> LogRankResult:
    a, b = SurvivalData.from_records(records_a), SurvivalData.from_records(records_b)
    if len(a) == 0 or len(b) == 0:
        raise InputError("Both groups need at least one record for a log-rank test")
    if a.n_events + b.n_events == 0:
        raise InputError("The log-rank statistic is undefined when neither group has an event")
    result = logrank_test(a.times, b.times, event_observed_A=a.events, event_observed_B=b.events)
    return LogRankResult(float(result.test_statistic), float(result.p_value))


def _comparable(times, events, tau=np.inf):
    # pairs (i, j) with i uncensored, t_i < t_j and t_i < tau
    return (events[:, None] == 1) & (times[:, None] < times[None, :]) & (times[:, None] < tau)


def _pair_scores(scores):
    return (scores[:, None] > scores[None, :]) + 0.5 * (scores[:, None] == scores[None, :])


def harrell_c(risk_scores, records):
    data = SurvivalData.from_records(records)
    scores = np.asarray(risk_scores, dtype=float)
    comparable = _comparable(data.times, data.events)
    if not comparable.any():
        raise InputError("No comparable pairs; concordance is undefined")
    return float(np.sum(_pair_scores(scores)[comparable]) / np.sum(comparable))


def censoring_survival(records):
    """Kaplan-Meier estimate of the censoring distribution's survival, evaluated just before each time."""
    data = SurvivalData.from_records(records)
    kmf = KaplanMeierFitter()
    kmf.fit(durations=data.times, event_observed=1 - data.events)
    before = np.nextafter(data.times, 0.0)
    return kmf.survival_function_at_times(before).to_numpy()


def uno_c(risk_scores, records, tau=None):
    data = SurvivalData.from_records(records)
    scores = np.asarray(risk_scores, dtype=float)
    if tau is None:
        if data.n_events == 0:
            raise InputError("No uncensored records; concordance is undefined")
        tau = float(np.max(data.times[data.events == 1]))
    G = np.maximum(censoring_survival(data), 1e-12)
    weights = (1.0 / G**2)[:, None]
    comparable = _comparable(data.times, data.events, tau)
    if not comparable.any():
        raise InputError("No comparable pairs before the truncation time; concordance is undefined")
    W = np.where(comparable, weights, 0.0)
    return float(np.sum(W * _pair_scores(scores)) / np.sum(W))


def concordance(risk_scores, records, variant="harrell", tau=None):
    scores = np.asarray(risk_scores, dtype=float)
    data = SurvivalData.from_records(records)
    if scores.shape != (len(data),):
        raise InputError(f"Got {scores.size} risk scores for {len(data)} records")
    if variant == "harrell":
        return harrell_c(scores, data)
    if variant == "uno":
        return uno_c(scores, data, tau)
    raise InputError(f"Unknown concordance variant '{variant}'; use harrell or uno")


def mse_event_times(predicted, records):
    """Mean squared error over uncensored records only."""
    data = SurvivalData.from_records(records)
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != (len(data),):
        raise InputError(f"Got {predicted.size} predictions for {len(data)} records")
    observed = data.events == 1
    if not observed.any():
        raise InputError("No uncensored records to compute the event-time MSE")
    return float(np.mean((predicted[observed] - data.times[observed]) ** 2))


def split_risk_groups(risk_scores):
    """Median split by risk; equal scores keep index order, and the low group takes the odd one out."""
    scores = np.asarray(risk_scores, dtype=float)
    order = np.argsort(scores, kind="stable")
    n_low = len(scores) - len(scores) // 2
    return np.sort(order[n_low:]), np.sort(order[:n_low])


@dataclass(frozen=True)
class ModelOptions:
    """Everything needed to train on one split and predict on another."""
    q: int = 2
    specs: tuple = (KernelSpec(),)
    priors: PriorConfig = PriorConfig()
    fit: FitOptions = FitOptions()
    hyper: HyperOptions = HyperOptions()
    projection: ProjectionOptions = ProjectionOptions()
    standardize: bool = True
    space: str = "latent"

    def __post_init__(self):
        if self.space not in ("latent", "observed"):
            raise InputError(f"Unknown model space '{self.space}'; use latent or observed")


@dataclass
class SplitPrediction:
    risk: np.ndarray
    mean_time: np.ndarray
    model: object = None


def fit_predict(Y_train, records_train, Y_test, opts: ModelOptions) -> SplitPrediction:
    """Train on one split and predict risk and mean event time on the other.

    In the observed space a WPHM is fitted directly on the stacked covariates.
    """
    scaler = Standardizer.fit(Y_train) if opts.standardize else Standardizer.identity(Y_train)
    Y_train, Y_test = scaler.transform(Y_train), scaler.transform(Y_test)

    if opts.space == "observed":
        Z_train, Z_test = np.hstack(Y_train), np.hstack(Y_test)
        params, _ = fit_wphm(records_train, Z_train, opts.priors)
        risk = Z_test @ params.b
        means = np.array([event_time_moments(s, params.rho, params.nu)[0] for s in risk])
        return SplitPrediction(risk, means, params)

    result = optimize_hyperparameters(Y_train, records_train, opts.q, list(opts.specs), opts.priors, opts.fit, opts.hyper)
    fit = result.fit
    rows = [list(r) for r in zip(*Y_test)]
    table = predict_batch(rows, fit, opts.projection)
    return SplitPrediction(table["risk"].to_numpy(), table["mean_time"].to_numpy(), fit)


def score_split(prediction: SplitPrediction, records, metric, tau=None):
    if metric == "mse":
        return mse_event_times(prediction.mean_time, records)
    return concordance(prediction.risk, records, metric, tau)


@dataclass
class CvReport:
    metric: str
    values: list
    valid: list
    folds: list
    mean: float = np.nan
    predictions: list = field(default_factory=list, repr=False)

    def to_frame(self):
        rows = [{"fold": k + 1, "metric": self.metric, "value": v, "valid": ok, "size": len(f)}
                for k, (v, ok, f) in enumerate(zip(self.values, self.valid, self.folds))]
        rows.append({"fold": "mean", "metric": self.metric, "value": self.mean,
                     "valid": bool(np.isfinite(self.mean)), "size": sum(len(f) for f in self.folds)})
        return pd.DataFrame(rows)


def kfold_cv(Y_set, records, k, model_opts: ModelOptions = ModelOptions(), metric="harrell", seed=0,
             workers=1, tau=None) -> CvReport:
    data = SurvivalData.from_records(records)
    Y_set = [np.asarray(Y, dtype=float) for Y in Y_set]
    n = len(data)
    if metric not in METRICS:
        raise InputError(f"Unknown metric '{metric}'; use one of {', '.join(METRICS)}")
    if k < 2 or n < k:
        raise InputError(f"k-fold cross-validation needs 2 <= k <= N, got k={k}, N={n}")

    splits = list(KFold(n_splits=k, shuffle=True, random_state=seed).split(np.arange(n)))

    def run(fold):
        train, test = splits[fold]
        logger.info(f"Cross-validation fold {fold + 1}/{k}: train={len(train)} test={len(test)}")
        prediction = fit_predict([Y[train] for Y in Y_set], data.subset(train), [Y[test] for Y in Y_set], model_opts)
        try:
            value = score_split(prediction, data.subset(test), metric, tau)
        except InputError as e:
            logger.warning(f"Fold {fold + 1} is invalid and excluded from the mean: {e}")
            value = np.nan
        return value, prediction

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(fold) for fold in range(k)]

    values = [v for v, _ in results]
    valid = [bool(np.isfinite(v)) for v in values]
    mean = float(np.mean([v for v, ok in zip(values, valid) if ok])) if any(valid) else np.nan
    return CvReport(
        metric=metric,
        values=values,
        valid=valid,
        folds=[test for _, test in splits],
        mean=mean,
        predictions=[p for _, p in results],
    )
