import numpy as np
import pytest

from src.experiments import (
    PRESETS,
    STUDIES,
    StudyOptions,
    dimension_detection,
    manifold_recovery,
    mse_by_censoring,
    mse_by_dimension,
    multi_source_benefit,
    retrieval_accuracy,
    supervision_benefit,
)
from src.model import HyperOptions

FIXED = StudyOptions(hyper=HyperOptions(optimize=False))


def test_retrieval_rows():
    frame = retrieval_accuracy([0], FIXED)
    assert list(frame.columns[:4]) == ["seed", "radial", "angular", "linear"]
    assert len(frame) == 1
    assert np.all(frame[["radial", "angular", "linear"]].to_numpy() >= 0)


def test_supervision_rows_share_the_data():
    frame = supervision_benefit([1], FIXED)
    assert list(frame.model) == ["gplvm-wphm", "gplvm"]
    assert set(frame.seed) == {1}


def test_study_registry():
    assert set(STUDIES) == {"retrieval", "supervision", "multi_source", "mse_dimension", "mse_noise",
                            "mse_censoring", "manifold", "scan"}


@pytest.mark.slow
def test_dimension_is_detected():
    frame = dimension_detection(range(20), StudyOptions(workers=4))
    linear = frame[frame.kernel == "linear"].set_index("seed")
    poly = frame[frame.kernel == "poly2"].set_index("seed")
    assert (linear.q_star == 2).sum() >= 16
    assert (linear.hyp_nll_at_q_star < poly.hyp_nll_at_q_star).sum() >= 16


@pytest.mark.slow
def test_pattern_is_retrieved():
    frame = retrieval_accuracy(range(10), StudyOptions(workers=4))
    assert frame.radial.median() <= 3 * 0.0051
    assert frame.angular.median() <= 3 * 0.0086
    assert frame.linear.median() <= 3 * 0.0288


@pytest.mark.slow
def test_survival_term_lowers_errors():
    frame = supervision_benefit(range(20), StudyOptions(workers=4))
    means = frame.groupby("model")[["radial", "angular", "linear"]].mean()
    assert (means.loc["gplvm-wphm"] < means.loc["gplvm"]).all()


@pytest.mark.slow
def test_combined_sources_lower_errors():
    frame = multi_source_benefit(range(20), StudyOptions(workers=4))
    means = frame.groupby("sources")[["radial", "angular", "linear"]].mean()
    for single in ("Y1", "Y2"):
        assert (means.loc["all"] < means.loc[single]).all()


@pytest.mark.slow
def test_latent_mse_beats_observed_in_high_dimension():
    frame = mse_by_dimension(range(20), StudyOptions(workers=4), dims=(10, 50, 100))
    means = frame.groupby("d")[["latent", "observed"]].mean()
    assert means.loc[50, "latent"] < means.loc[50, "observed"]
    assert means.loc[100, "latent"] < means.loc[100, "observed"]
    gap = means.observed - means.latent
    assert gap.loc[100] > gap.loc[10]


@pytest.mark.slow
def test_censoring_widens_the_gap():
    frame = mse_by_censoring(range(20), StudyOptions(workers=4), fractions=(0.10, 0.25, 0.50))
    means = frame.groupby("censor_frac")[["latent", "observed"]].mean()
    gap = (means.observed - means.latent).to_numpy()
    assert np.all(np.diff(gap) > 0)


@pytest.mark.slow
def test_manifold_is_recovered():
    frame = manifold_recovery(range(10), StudyOptions(workers=4))
    separated = (frame.latent_p < 1e-3) & (frame.observed_p > 0.05)
    assert separated.sum() >= 8
    truth = PRESETS["manifold"]["sources"][0].spec
    for name in ("noise_var", "sigma", "lengthscale"):
        assert frame[name].median() == pytest.approx(getattr(truth, name), rel=0.5)
