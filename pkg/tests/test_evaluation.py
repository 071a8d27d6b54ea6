import numpy as np
import pytest
from scipy import stats

from src.errors import InputError
from src.evaluation import (
    ModelOptions,
    concordance,
    fit_predict,
    harrell_c,
    kaplan_meier,
    kfold_cv,
    log_rank,
    mse_event_times,
    split_risk_groups,
    uno_c,
)
from src.wphm import SurvivalData

from conftest import make_cohort


def _random_records(rng, n):
    # integer-valued times so ties are common
    times = rng.integers(1, 8, size=n).astype(float)
    events = (rng.random(n) < 0.7).astype(int)
    return SurvivalData(times, events)


def _km_oracle(data):
    survival, out = 1.0, {}
    for t in np.unique(data.times[data.events == 1]):
        at_risk = np.sum(data.times >= t)
        deaths = np.sum((data.times == t) & (data.events == 1))
        survival *= 1 - deaths / at_risk
        out[t] = survival
    return out


def _logrank_oracle(a, b):
    times = np.concatenate([a.times, b.times])
    events = np.concatenate([a.events, b.events])
    group = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    o_minus_e, var = 0.0, 0.0
    for t in np.unique(times[events == 1]):
        at_risk = times >= t
        n, n_a = at_risk.sum(), (at_risk & (group == 0)).sum()
        d = np.sum((times == t) & (events == 1))
        d_a = np.sum((times == t) & (events == 1) & (group == 0))
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    chi = o_minus_e**2 / var
    return chi, stats.chi2.sf(chi, 1)


def _harrell_oracle(scores, data):
    num = den = 0.0
    for i in range(len(data)):
        for j in range(len(data)):
            if data.events[i] == 1 and data.times[i] < data.times[j]:
                den += 1
                num += 1.0 if scores[i] > scores[j] else 0.5 if scores[i] == scores[j] else 0.0
    return num / den


def test_kaplan_meier_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        data = _random_records(rng, int(rng.integers(2, 31)))
        if data.n_events == 0:
            continue
        curve = kaplan_meier(data)
        for t, expected in _km_oracle(data).items():
            assert curve.survival_at(t) == pytest.approx(expected, abs=1e-12)
        assert curve.survival_at(0.5) == 1.0


def test_log_rank_matches_oracle():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(100):
        a = _random_records(rng, int(rng.integers(2, 16)))
        b = _random_records(rng, int(rng.integers(2, 16)))
        if a.n_events + b.n_events == 0:
            continue
        pooled = np.concatenate([a.times, b.times])
        event_times = np.concatenate([a.times[a.events == 1], b.times[b.events == 1]])
        if any(np.sum(pooled >= t) < 2 for t in event_times):
            continue
        chi, p = _logrank_oracle(a, b)
        if not np.isfinite(chi):
            continue
        result = log_rank(a, b)
        assert result.chi_square == pytest.approx(chi, rel=1e-9, abs=1e-12)
        assert result.p_value == pytest.approx(p, rel=1e-9, abs=1e-12)
        checked += 1
    assert checked > 20


def test_log_rank_edge_cases():
    a = SurvivalData([1.0, 2.0], [0, 0])
    with pytest.raises(InputError):
        log_rank(a, SurvivalData([3.0], [0]))
    with pytest.raises(InputError):
        log_rank(a, [])


def test_harrell_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(3, 31))
        data = _random_records(rng, n)
        scores = rng.integers(0, 5, size=n).astype(float)
        if data.n_events == 0 or not any(data.events[i] and data.times[i] < data.times.max() for i in range(n)):
            continue
        assert harrell_c(scores, data) == pytest.approx(_harrell_oracle(scores, data), abs=1e-14)


def test_concordance_extremes():
    data = SurvivalData([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 0])
    assert concordance([4.0, 3.0, 2.0, 1.0], data) == 1.0
    assert concordance([1.0, 2.0, 3.0, 4.0], data) == 0.0
    assert concordance([1.0, 1.0, 1.0, 1.0], data) == 0.5
    with pytest.raises(InputError):
        concordance([1.0, 2.0], data)
    with pytest.raises(InputError):
        concordance([1.0, 2.0, 3.0, 4.0], data, variant="somers")
    with pytest.raises(InputError):
        concordance([1.0, 2.0], SurvivalData([1.0, 2.0], [0, 0]))


def test_uno_equals_harrell_without_censoring():
    rng = np.random.default_rng(3)
    times = rng.permutation(np.arange(1.0, 21.0))
    data = SurvivalData(times, np.ones(20, dtype=int))
    scores = rng.standard_normal(20)
    assert uno_c(scores, data) == pytest.approx(harrell_c(scores, data), abs=1e-12)


def test_mse_uses_uncensored_records():
    data = SurvivalData([1.0, 2.0, 3.0], [1, 0, 1])
    assert mse_event_times([2.0, 100.0, 3.0], data) == pytest.approx(0.5)
    with pytest.raises(InputError):
        mse_event_times([1.0], data)


def test_split_risk_groups():
    high, low = split_risk_groups([0.1, 5.0, 3.0, -2.0, 3.0])
    assert list(high) == [1, 4]
    assert list(low) == [0, 2, 3]
    high, low = split_risk_groups([1.0, 1.0, 1.0, 1.0])
    assert list(high) == [2, 3] and list(low) == [0, 1]


def test_observed_space_baseline():
    X, Y_set, records, _ = make_cohort(n=40, d=3)
    prediction = fit_predict([Y[:30] for Y in Y_set], records.subset(np.arange(30)), [Y[30:] for Y in Y_set],
                             ModelOptions(space="observed"))
    assert prediction.risk.shape == (10,)
    assert np.all(prediction.mean_time > 0)
    with pytest.raises(InputError):
        ModelOptions(space="hidden")


def test_kfold_report_shape():
    _, Y_set, records, _ = make_cohort(n=40, d=3, censor_frac=0.1)
    report = kfold_cv(Y_set, records, 8, ModelOptions(space="observed"), metric="harrell", seed=1)
    frame = report.to_frame()
    assert len(frame) == 9
    assert frame.fold.iloc[-1] == "mean"
    assert sorted(np.concatenate(report.folds).tolist()) == list(range(40))
    again = kfold_cv(Y_set, records, 8, ModelOptions(space="observed"), metric="harrell", seed=1)
    assert np.array_equal(np.array(report.values), np.array(again.values), equal_nan=True)
    with pytest.raises(InputError):
        kfold_cv(Y_set, records, 1)
    with pytest.raises(InputError):
        kfold_cv(Y_set, records, 4, metric="auc")
