import datetime as dt
import math

import numpy as np
import pytest

from mrtsim import seeding
from mrtsim.analysis import (NullBand, advantage_trajectory, did_we_learn, dwl_output,
                             error_metrics, first_quartile, outcome_metrics, pooling_experiment,
                             quantile_band, standardized_predicted_advantage, value_metrics)
from mrtsim.bandit import Prior
from mrtsim.environment import gen_synthetic_models
from mrtsim.errors import AnalysisError, InputError, UndefinedStatisticError
from mrtsim.orchestrator import run_trial
from mrtsim.trial import DecisionRecord, PosteriorSnapshot, TrialConfig

from oracles import sample_var


def make_history(per_participant):
    out = []
    d0 = dt.date(2023, 9, 1)
    for pid, qs in per_participant.items():
        for t, q in enumerate(qs, start=1):
            out.append(DecisionRecord(pid, t, d0 + dt.timedelta(days=(t - 1) // 2), (t - 1) % 2,
                                      (0, 0, 0, 0, 1), (0, 0, 0, 0, 0, 0, 1), 0.5, 0, q, float(q)))
    return out


FIXTURE = {1: [0, 60, 120, 0], 2: [30, 30, 0, 90]}


def test_outcome_metrics_fixture():
    m = outcome_metrics(make_history(FIXTURE))
    assert m["proportion_zero"] == 3 / 8
    assert m["avg_nonzero_in_trial"] == 66.0
    assert m["avg_of_avg_nonzero_participant"] == 70.0
    assert m["var_of_avg_nonzero_participant"] == 800.0
    assert m["var_nonzero_in_trial"] == 1530.0
    assert m["var_of_avg_participant"] == 28.125
    assert m["avg_of_var_participant"] == 2362.5
    assert m["participants_without_nonzero"] == []


def test_outcome_metrics_match_oracle_variance():
    rng = np.random.default_rng(0)
    data = {p: list(rng.integers(0, 100, 10)) for p in range(1, 6)}
    m = outcome_metrics(make_history(data))
    avgs = [np.mean(v) for v in data.values()]
    assert m["var_of_avg_participant"] == pytest.approx(sample_var(avgs), rel=1e-12)
    assert m["avg_of_var_participant"] == pytest.approx(np.mean([sample_var(v) for v in data.values()]), rel=1e-12)


def test_outcome_metrics_all_zero_participant():
    m = outcome_metrics(make_history({1: [0, 0], 2: [0, 40]}))
    assert m["participants_without_nonzero"] == [1]
    assert m["avg_of_avg_nonzero_participant"] == 40.0
    assert m["var_of_avg_nonzero_participant"] is None
    assert m["var_nonzero_in_trial"] is None


def test_error_metrics_fixture():
    sim = make_history({1: [11, 8, 3, 0]})
    ref = make_history({1: [10, 10, 0, 0]})
    e = error_metrics(sim, ref)
    assert e["mse"] == 3.5
    assert e["rmse"] == math.sqrt(3.5)
    assert e["mae"] == 1.5


def test_error_metrics_misaligned():
    with pytest.raises(AnalysisError, match=r"\(1, 3\)"):
        error_metrics(make_history({1: [1, 2]}), make_history({1: [1, 2, 3]}))


def test_standardized_advantage_prior_anchor():
    p = Prior()
    z = standardized_predicted_advantage(p.mean[10:], p.cov[10:, 10:], [0, -0.7, -0.6, 1, 1])
    assert z == pytest.approx(53 / math.sqrt(4399.61), rel=1e-12)
    assert z == pytest.approx(0.79904, abs=1e-5)


def test_standardized_advantage_undefined():
    with pytest.raises(UndefinedStatisticError):
        standardized_predicted_advantage(np.ones(5), np.zeros((5, 5)), np.ones(5))


def test_trajectory_uses_pooled_snapshots():
    p = Prior()
    snaps = [PosteriorSnapshot(1, dt.date(2023, 9, 3), p.mean, p.cov),
             PosteriorSnapshot(1, dt.date(2023, 9, 3), p.mean, p.cov, participant_id=4),
             PosteriorSnapshot(2, dt.date(2023, 9, 10), p.mean, p.cov)]
    tr = advantage_trajectory(snaps, [0, -0.7, -0.6, 1, 1])
    assert len(tr) == 2 and tr.taus[1] == (2, dt.date(2023, 9, 10))


def test_first_quartile():
    assert first_quartile([4, 1, 3, 2, 5]) == 2.0
    assert first_quartile([1, 2, 3, 4]) == 1.75
    assert first_quartile([1, 2, 3, 4]) == np.quantile([1, 2, 3, 4], 0.25)


def test_value_metrics():
    v = value_metrics(make_history(FIXTURE), T=4)
    assert v["mean"] == pytest.approx(41.25)
    with pytest.raises(AnalysisError):
        value_metrics(make_history(FIXTURE), T=6)


def test_quantile_band():
    vals = np.arange(101, dtype=float)[:, None] * np.ones((1, 3))
    lo, hi = quantile_band(vals)
    np.testing.assert_allclose(lo, 2.5)
    np.testing.assert_allclose(hi, 97.5)
    band = NullBand([], vals, lo, hi)
    assert band.reps == 101
    np.testing.assert_array_equal(band.contains([0, 50, 100]), [False, True, False])
    with pytest.raises(InputError):
        quantile_band(vals[:1])


SMALL = TrialConfig(num_participants=4, cohort_size=2, days_per_participant=14, master_seed=2)


@pytest.fixture(scope="module")
def small_models():
    return gen_synthetic_models(SMALL, seeding.stream(2, "env-models"))


def test_did_we_learn_small(small_models):
    hist, _ = run_trial(SMALL, small_models)
    f = np.array([1, 0.1, -0.1, 1, 1])
    ref, band = did_we_learn(hist.snapshots, small_models, f, 8, SMALL)
    assert band.rep_values.shape == (8, len(ref))
    assert np.all(band.q_low <= band.q_high)
    out = dwl_output(f, ref, band)
    assert set(out) == {"state", "taus", "reference", "band_low", "band_high", "rep_values"}
    _, again = did_we_learn(hist.snapshots, small_models, f, 8, SMALL)
    np.testing.assert_array_equal(band.rep_values, again.rep_values)


def test_did_we_learn_calendar_mismatch(small_models):
    p = Prior()
    snaps = [PosteriorSnapshot(1, dt.date(2023, 9, 3), p.mean, p.cov)]
    with pytest.raises(AnalysisError):
        did_we_learn(snaps, small_models, np.array([1, 0, 0, 1, 1]), 2, SMALL)


def test_pooling_small(small_models):
    rows = pooling_experiment(SMALL, small_models, 3)
    assert [r.mode for r in rows] == ["full_pooling", "no_pooling"]
    assert all(len(r.rep_means) == 3 and r.mean_se >= 0 for r in rows)
    single = pooling_experiment(SMALL, small_models, 1)
    assert single[0].single_rep and single[0].mean_se == 0.0


def test_first_quartile_three_participants():
    vals = [40, 70, 100]
    assert np.mean(vals) == 70
    assert first_quartile(vals) == 55.0
