"""Engagement summaries: window logit scores, group rate, bands, files."""
import json
import math

import numpy as np
import pytest

from rlhmm.core import ConfigError, DomainError
from rlhmm.engage import (EngagementReport, default_windows,
                          engagement_report, engagement_scores,
                          group_rate_bands, write_engagement)
from rlhmm.hmm import PosteriorSet


def posterior_set(gamma_engaged, ids=None):
    """Wrap an (n, T) engaged-probability matrix as a PosteriorSet."""
    g1 = np.asarray(gamma_engaged, dtype=float)
    n, T = g1.shape
    gamma = np.stack([1.0 - g1, g1], axis=2)
    xi = np.full((n, T - 1, 2, 2), 0.25)
    ids = tuple(ids) if ids is not None \
        else tuple(f"p{i}" for i in range(n))
    return PosteriorSet(gamma=gamma, xi=xi, log_lik=np.zeros(n),
                        scale_factors=np.ones((n, T)), subject_ids=ids)


def test_scores_hand_values():
    gamma = np.array([[0.5, 0.5, 0.9, 0.9]])
    out = engagement_scores(gamma, [(1, 2), (3, 4)])
    assert out.shape == (1, 2)
    assert out[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert out[0, 1] == pytest.approx(math.log(9.0), abs=1e-12)


def test_single_trial_windows_recover_logits_bitwise():
    rng = np.random.default_rng(4)
    gamma = rng.uniform(0.05, 0.95, size=(3, 6))
    windows = [(t,) for t in range(1, 7)]
    out = engagement_scores(gamma, windows)
    from scipy.special import logit
    assert out.tobytes() == logit(gamma).tobytes()


def test_scores_clamp_extreme_probabilities():
    gamma = np.array([[0.0, 1.0]])
    out = engagement_scores(gamma, [(1,), (2,)])
    assert np.all(np.isfinite(out))
    from scipy.special import logit
    assert out[0, 0] == logit(1e-12)
    assert out[0, 1] == logit(1.0 - 1e-12)


def test_scores_accept_posterior_set():
    gamma = np.array([[0.2, 0.8], [0.6, 0.4]])
    direct = engagement_scores(gamma, [(1, 2)])
    via_set = engagement_scores(posterior_set(gamma), [(1, 2)])
    assert via_set.tobytes() == direct.tobytes()


def test_default_windows_quartiles():
    assert default_windows(100) == (
        tuple(range(1, 26)), tuple(range(26, 51)),
        tuple(range(51, 76)), tuple(range(76, 101)))
    # uneven split mirrors np.array_split sizes
    assert [len(w) for w in default_windows(10)] == [3, 3, 2, 2]
    # short horizons drop empty parts
    assert default_windows(3) == ((1,), (2,), (3,))


def test_window_validation():
    gamma = np.full((2, 5), 0.5)
    with pytest.raises(ConfigError):
        engagement_scores(gamma, [(1, 2), ()])
    with pytest.raises(ConfigError):
        engagement_scores(gamma, [(0, 1)])
    with pytest.raises(ConfigError):
        engagement_scores(gamma, [(5, 6)])
    with pytest.raises(ConfigError):
        engagement_scores(gamma, [])


def test_gamma_validation():
    with pytest.raises(DomainError):
        engagement_scores(np.array([0.5, 0.5]), [(1,)])
    with pytest.raises(DomainError):
        engagement_scores(np.array([[0.5, 1.5]]), [(1,)])
    with pytest.raises(DomainError):
        engagement_scores(np.array([[0.5, np.nan]]), [(1,)])
    with pytest.raises(DomainError):
        engagement_scores(np.empty((0, 0)), [(1,)])


def test_report_group_rate_is_subject_mean():
    rng = np.random.default_rng(11)
    gamma = rng.uniform(0.0, 1.0, size=(7, 12))
    rep = engagement_report(gamma)
    assert rep.group_rate.tobytes() == gamma.mean(axis=0).tobytes()
    assert rep.individual.tobytes() == gamma.tobytes()
    assert rep.windows == default_windows(12)
    assert rep.scores.shape == (7, 4)
    assert rep.band_lower is None and rep.band_upper is None


def test_report_subject_ids():
    gamma = np.full((2, 4), 0.5)
    rep = engagement_report(gamma)
    assert rep.subject_ids == ("s0001", "s0002")
    rep2 = engagement_report(posterior_set(gamma, ids=("a", "b")))
    assert rep2.subject_ids == ("a", "b")
    rep3 = engagement_report(gamma, subject_ids=["x", "y"])
    assert rep3.subject_ids == ("x", "y")
    with pytest.raises(DomainError):
        engagement_report(gamma, subject_ids=["x"])


def test_report_validation():
    gamma = np.full((2, 4), 0.5)
    with pytest.raises(DomainError):
        EngagementReport(subject_ids=("a",), individual=gamma,
                         group_rate=gamma.mean(axis=0),
                         windows=((1,),), scores=np.zeros((2, 1)))
    with pytest.raises(DomainError):
        EngagementReport(subject_ids=("a", "b"), individual=gamma,
                         group_rate=gamma.mean(axis=0),
                         windows=((1,), (2,)), scores=np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        EngagementReport(subject_ids=("a", "b"), individual=gamma,
                         group_rate=gamma.mean(axis=0),
                         windows=((1,),), scores=np.zeros((2, 1)),
                         band_lower=np.zeros(4))


def test_bands_contain_group_rate():
    rng = np.random.default_rng(5)
    gamma = rng.uniform(0.1, 0.9, size=(15, 20))
    lower, upper = group_rate_bands(gamma, B=200, seed=3)
    center = gamma.mean(axis=0)
    assert np.all(lower <= center + 1e-12)
    assert np.all(center <= upper + 1e-12)
    assert lower.min() >= 0.0 and upper.max() <= 1.0
    # wider level widens the band
    lo99, hi99 = group_rate_bands(gamma, B=200, seed=3, level=0.99)
    assert np.all(hi99 - lo99 >= upper - lower - 1e-12)


def test_bands_seeded():
    gamma = np.random.default_rng(9).uniform(0.2, 0.8, size=(8, 10))
    a = group_rate_bands(gamma, B=50, seed=1)
    b = group_rate_bands(gamma, B=50, seed=1)
    c = group_rate_bands(gamma, B=50, seed=2)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()
    assert a[0].tobytes() != c[0].tobytes()


def test_bands_level_validation():
    gamma = np.full((3, 4), 0.5)
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ConfigError):
            group_rate_bands(gamma, B=10, level=bad)


def test_window_labels_in_scores_csv(tmp_path):
    gamma = np.array([[0.5, 0.6, 0.7, 0.8]])
    rep = engagement_report(gamma, windows=[(1, 2), (2, 4)])
    paths = write_engagement(rep, tmp_path)
    rows = paths["scores"].read_text().strip().splitlines()
    assert rows[0] == "subject,window,score"
    assert rows[1].startswith("s0001,t1-2,")
    # non-contiguous window listed trial by trial
    assert rows[2].startswith("s0001,t2+4,")


def test_write_engagement_files(tmp_path):
    rng = np.random.default_rng(2)
    gamma = rng.uniform(0.1, 0.9, size=(3, 8))
    bands = group_rate_bands(gamma, B=40, seed=0)
    rep = engagement_report(gamma, bands=bands)
    paths = write_engagement(rep, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "engagement.json", "engagement_group.csv",
        "engagement_individual.csv", "engagement_scores.csv"]

    indiv = paths["individual"].read_text().strip().splitlines()
    assert indiv[0] == "subject,trial,gamma_engaged"
    assert len(indiv) == 1 + 3 * 8
    assert float(indiv[1].split(",")[2]) == gamma[0, 0]

    group = paths["group"].read_text().strip().splitlines()
    assert group[0] == "trial,rate,lower,upper"
    assert len(group) == 1 + 8
    t1 = group[1].split(",")
    assert float(t1[1]) == gamma.mean(axis=0)[0]
    assert float(t1[2]) <= float(t1[1]) <= float(t1[3])

    doc = json.loads(paths["json"].read_text())
    assert doc["subject_ids"] == ["s0001", "s0002", "s0003"]
    assert np.allclose(doc["group_rate"], gamma.mean(axis=0))
    assert "band_lower" in doc and "band_upper" in doc


def test_write_engagement_without_bands(tmp_path):
    gamma = np.full((2, 4), 0.5)
    paths = write_engagement(engagement_report(gamma), tmp_path)
    group = paths["group"].read_text().strip().splitlines()
    assert group[0] == "trial,rate"
    doc = json.loads(paths["json"].read_text())
    assert "band_lower" not in doc
