import datetime as dt

import pytest

from mrtsim.errors import InputError
from mrtsim.trial import (DecisionRecord, PosteriorSnapshot, TrialConfig, TrialHistory,
                          batch_for_update, decision_index, history_from_records,
                          read_history_csv, read_snapshots_jsonl, recruitment_schedule,
                          trial_span, update_times, write_history_csv, write_snapshots_jsonl)

import numpy as np


def rec(pid, t, date, excluded=False, reward=1.0):
    slot = (t - 1) % 2
    return DecisionRecord(pid, t, date, slot, (slot, 0, 0, 0, 1), (slot, 0, 0, 0, 0, 0, 1),
                          0.5, 1, 10, reward, excluded=excluded)


def test_defaults():
    cfg = TrialConfig()
    assert cfg.T == 140
    assert cfg.trial_start_date == dt.date(2023, 9, 1)
    assert cfg.update_weekday == "sunday"


@pytest.mark.parametrize("bad", [{"cohort_size": 0}, {"num_participants": -1},
                                 {"decisions_per_day": 3}, {"reward_cost_weight": -1}])
def test_config_rejects(bad):
    with pytest.raises(InputError):
        TrialConfig(**bad)


def test_config_unknown_key():
    with pytest.raises(InputError, match="bogus"):
        TrialConfig.from_dict({"bogus": 1})


def test_recruitment_default_cadence():
    sched = recruitment_schedule(TrialConfig())
    start = dt.date(2023, 9, 1)
    offsets = [(s - start).days for _, s in sched]
    assert len(set(offsets)) == 15
    assert offsets[:5] == [0] * 5
    assert offsets[5:10] == [14] * 5
    assert offsets[70:] == [196, 196]
    assert [pid for pid, _ in sched] == list(range(1, 73))


def test_single_cohort():
    sched = recruitment_schedule(TrialConfig(cohort_size=72))
    assert {s for _, s in sched} == {dt.date(2023, 9, 1)}


def test_trial_span_is_266_days():
    first, last = trial_span(TrialConfig())
    assert (last - first).days + 1 == 266
    assert last == dt.date(2023, 9, 1) + dt.timedelta(days=196 + 69)


def test_update_times():
    taus = update_times(TrialConfig())
    assert taus[0].date == dt.date(2023, 9, 3)
    assert len(taus) == 38
    assert all(u.date.weekday() == 6 for u in taus)
    assert [u.index for u in taus] == list(range(1, 39))


def test_update_times_monday():
    taus = update_times(TrialConfig(update_weekday="monday"))
    assert all(u.date.weekday() == 0 for u in taus)
    assert taus[0].date == dt.date(2023, 9, 4)


def test_calendar_replay_identical():
    cfg = TrialConfig(master_seed=5)
    assert repr(recruitment_schedule(cfg)) == repr(recruitment_schedule(cfg))
    assert repr(update_times(cfg)) == repr(update_times(cfg))


def test_decision_index():
    assert decision_index(1, 0) == 1
    assert decision_index(1, 1) == 2
    assert decision_index(70, 1) == 140


def test_batch_before_any_decision_is_empty():
    h = history_from_records([rec(1, 1, dt.date(2023, 9, 5))])
    assert batch_for_update(h, dt.date(2023, 9, 3)) == []


def test_batch_excludes_flagged():
    d0 = dt.date(2023, 9, 1)
    records = [rec(1, t, d0 + dt.timedelta(days=(t - 1) // 2), excluded=(t == 4)) for t in range(1, 7)]
    h = history_from_records(records)
    assert len(batch_for_update(h, dt.date(2023, 9, 4))) == 5


def test_batch_two_participants_staggered():
    cfg = TrialConfig(num_participants=2, cohort_size=1)
    starts = dict(recruitment_schedule(cfg))
    h = TrialHistory(start_dates=starts)
    for pid, start in starts.items():
        for day in range(1, 20):
            for slot in (0, 1):
                h.append(rec(pid, decision_index(day, slot), start + dt.timedelta(days=day - 1)))
    tau = dt.date(2023, 9, 1) + dt.timedelta(days=16)
    batch2 = batch_for_update(h, tau, participant_id=2)
    assert len(batch2) <= 4
    per_p = {p: max(r.t for r in h.participant_records(p) if r.date < tau) for p in (1, 2)}
    assert per_p == {1: 32, 2: 4}


def test_batch_monotone():
    d0 = dt.date(2023, 9, 1)
    records = [rec(1, t, d0 + dt.timedelta(days=(t - 1) // 2), excluded=(t % 5 == 0)) for t in range(1, 41)]
    h = history_from_records(records)
    b1 = batch_for_update(h, d0 + dt.timedelta(days=6))
    b2 = batch_for_update(h, d0 + dt.timedelta(days=13))
    assert b1 == b2[: len(b1)]


def test_duplicate_record_rejected():
    h = history_from_records([rec(1, 1, dt.date(2023, 9, 1))])
    with pytest.raises(InputError):
        h.append(rec(1, 1, dt.date(2023, 9, 1)))


def test_snapshots_must_be_ordered():
    h = TrialHistory()
    eye = np.eye(15)
    h.add_snapshot(PosteriorSnapshot(1, dt.date(2023, 9, 3), np.zeros(15), eye))
    with pytest.raises(InputError):
        h.add_snapshot(PosteriorSnapshot(1, dt.date(2023, 9, 10), np.zeros(15), eye))


def test_history_csv_round_trip(tmp_path):
    d0 = dt.date(2023, 9, 1)
    records = [rec(1, t, d0 + dt.timedelta(days=(t - 1) // 2), reward=0.1 * t) for t in range(1, 5)]
    h = history_from_records(records)
    write_history_csv(h, tmp_path / "h.csv")
    back = read_history_csv(tmp_path / "h.csv")
    assert back == records


def test_history_csv_bad_rows(tmp_path):
    d0 = dt.date(2023, 9, 1)
    h = history_from_records([rec(1, 1, d0), rec(1, 2, d0)])
    write_history_csv(h, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    lines[2] = lines[2].replace("0.5", "oops", 1)
    (tmp_path / "h.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(InputError, match="3"):
        read_history_csv(tmp_path / "h.csv")


def test_snapshot_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((15, 15))
    snap = PosteriorSnapshot(3, dt.date(2023, 9, 17), rng.standard_normal(15), a @ a.T)
    write_snapshots_jsonl([snap], tmp_path / "s.jsonl")
    (back,) = read_snapshots_jsonl(tmp_path / "s.jsonl")
    assert back.tau_index == 3 and back.date == snap.date
    np.testing.assert_array_equal(back.mu, snap.mu)
    np.testing.assert_array_equal(back.sigma, snap.sigma)
