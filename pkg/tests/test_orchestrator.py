import datetime as dt
import json
import time

import numpy as np
import pytest

from mrtsim import seeding
from mrtsim.bandit import PosteriorState, Prior, action_prob, fit_posterior
from mrtsim.environment import gen_synthetic_models
from mrtsim.errors import InputError, SetupError
from mrtsim.orchestrator import (EventLog, Fault, FaultPlan, apply_fallback_ii, fallback_totals,
                                 fault_report, trial_fault_plan, run_trial)
from mrtsim.trial import TrialConfig, batch_for_update, update_times

CFG = TrialConfig(num_participants=6, cohort_size=3, days_per_participant=21, master_seed=3)


@pytest.fixture(scope="module")
def models():
    return gen_synthetic_models(CFG, seeding.stream(3, "env-models"))


def test_every_decision_recorded(models):
    history, events = run_trial(CFG, models)
    assert len(history.records) == 6 * 42
    for pid in range(1, 7):
        ts = [r.t for r in history.participant_records(pid)]
        assert ts == list(range(1, 43))
    assert all(0.2 <= r.pi <= 0.8 for r in history.records)
    assert all(r.action in (0, 1) for r in history.records)
    assert len(events.of("recruit")) == 6


def test_snapshot_per_update_time(models):
    history, _ = run_trial(CFG, models)
    taus = update_times(CFG)
    assert [s.tau_index for s in history.snapshots] == [u.index for u in taus]
    for u, snap in zip(taus, history.snapshots):
        post = fit_posterior(Prior(), batch_for_update(history, u), u.index)
        np.testing.assert_allclose(snap.mu, post.mu, rtol=1e-12)


def test_update_runs_before_actions(models):
    history, events = run_trial(CFG, models)
    tau = update_times(CFG)[1]
    order = [e["event"] for e in events if e["date_obj"] == tau.date]
    assert order.index("policy_update") < order.index("schedule_pushed")
    snap = history.snapshots[1]
    post = PosteriorState(snap.mu, snap.sigma)
    for r in history.records:
        if r.date == tau.date:
            assert r.pi == pytest.approx(action_prob(post, r.alg_state), rel=1e-12)


def test_records_use_morning_state(models):
    history, _ = run_trial(CFG, models)
    recs = history.participant_records(1)
    for m, e in zip(recs[0::2], recs[1::2]):
        assert m.alg_state[1:] == e.alg_state[1:]
        assert (m.alg_state[0], e.alg_state[0]) == (0.0, 1.0)


def test_deterministic(models):
    a, ea = run_trial(CFG, models, master_seed=99)
    b, eb = run_trial(CFG, models, master_seed=99)
    assert a.records == b.records
    assert ea.rows() == eb.rows()
    c, _ = run_trial(CFG, models, master_seed=100)
    assert a.records != c.records


def test_no_pooling_snapshots(models):
    history, _ = run_trial(CFG, models, policy_mode="no_pooling")
    assert all(s.participant_id is not None for s in history.snapshots)
    pids = {s.participant_id for s in history.snapshots}
    assert pids == set(range(1, 7))
    for s in history.snapshots:
        u = [u for u in update_times(CFG) if u.index == s.tau_index][0]
        post = fit_posterior(Prior(), batch_for_update(history, u, s.participant_id))
        np.testing.assert_allclose(s.mu, post.mu, rtol=1e-12)


def test_too_few_models(models):
    with pytest.raises(SetupError):
        run_trial(CFG, models[:3])


def test_fault_outside_span(models):
    with pytest.raises(SetupError):
        run_trial(CFG, models, fault_plan=[Fault("2030-01-01", "service_down")])


def test_fault_on_inactive_participant(models):
    with pytest.raises(SetupError):
        run_trial(CFG, models, fault_plan=[Fault("2023-09-02", "service_down", (5,))])


def test_unknown_fault_type():
    with pytest.raises(InputError):
        Fault("2023-09-02", "meteor")


def test_service_down_uses_last_schedule(models):
    day = dt.date(2023, 9, 5)
    history, events = run_trial(CFG, models, fault_plan=[Fault(day, "service_down", (1,))])
    base, _ = run_trial(CFG, models)
    rec = [r for r in history.participant_records(1) if r.date == day]
    prev = [r for r in base.participant_records(1) if r.date == day - dt.timedelta(days=1)]
    assert all(r.fallback == "method_i" for r in rec)
    assert [r.pi for r in rec] == [r.pi for r in prev]
    assert len(events.of("fallback_i")) == 1


def test_service_down_on_first_day_uses_coin_flip(models):
    day = dt.date(2023, 9, 1)
    history, events = run_trial(CFG, models, fault_plan=[Fault(day, "service_down", (2,))])
    rec = [r for r in history.participant_records(2) if r.date == day]
    assert all(r.fallback == "method_ii" and r.pi == 0.5 for r in rec)
    assert events.of("fallback_ii")[0]["detail"]["reason"] == "service_down_without_prior_schedule"


def test_construction_failure(models):
    day = dt.date(2023, 9, 8)
    history, _ = run_trial(CFG, models, fault_plan=[Fault(day, "schedule_construction_failure", (1, 2))])
    for pid in (1, 2):
        rec = [r for r in history.participant_records(pid) if r.date == day]
        assert all(r.pi == 0.5 and r.fallback == "method_ii" for r in rec)


def test_fallback_ii_schedule():
    s = apply_fallback_ii(4, 10, np.random.default_rng(0), start_day=3)
    assert s.probs.shape == (10, 2) and np.all(s.probs == 0.5)
    assert s.provenance == "fallback_ii" and s.covers(12)


def test_retrieval_failure_excluded(models):
    day = dt.date(2023, 9, 6)
    history, _ = run_trial(CFG, models, fault_plan=[Fault(day, "data_retrieval_failure")])
    flagged = [r for r in history.records if r.excluded]
    assert {r.date for r in flagged} == {day}
    assert len(flagged) == 2 * 3
    for u in update_times(CFG):
        kept = [r for r in history.records if r.date < u.date and not r.excluded]
        assert len(batch_for_update(history, u)) == len(kept)


def test_event_log_chronological():
    log = EventLog()
    log.log(dt.date(2023, 9, 2), "daily_job")
    with pytest.raises(InputError):
        log.log(dt.date(2023, 9, 1), "daily_job")
    with pytest.raises(InputError):
        log.log(dt.date(2023, 9, 3), "party")


def test_fault_plan_json_round_trip(tmp_path):
    plan = FaultPlan([Fault("2023-09-05", "service_down"), Fault("2023-09-06", "data_retrieval_failure", (1,))])
    p = tmp_path / "plan.json"
    p.write_text(json.dumps(plan.to_json()))
    assert FaultPlan.load(p) == plan


def test_trial_plan_shape():
    plan = trial_fault_plan(TrialConfig())
    assert len(plan) == 15
    counts = {}
    for f in plan:
        counts.setdefault(f.fault_type, 0)
        counts[f.fault_type] += len(f.participants)
    assert counts == {"schedule_construction_failure": 7, "service_down": 94, "data_retrieval_failure": 8}
    assert [f.date for f in plan] == sorted(f.date for f in plan)


def test_fault_report_rows(models):
    plan = [Fault("2023-09-05", "service_down"), Fault("2023-09-06", "data_retrieval_failure", (1,))]
    _, events = run_trial(CFG, models, fault_plan=plan)
    rows = fault_report(events)
    assert rows[0] == {"date": "2023-09-05", "fault_type": "service_down", "fallback_method": "fallback_i",
                       "participants_affected": 3, "fallback_events": 3}
    assert rows[1]["fallback_events"] == 1
    assert fallback_totals(events) == {"fallback_i": 3, "fallback_ii": 0, "fallback_iii": 1}


def test_fallback_ii_action_mean():
    s = apply_fallback_ii(1, 5000, np.random.default_rng(1))
    assert abs(s.actions.mean() - 0.5) < 0.015


def test_six_day_retrieval_failure(models):
    days = [dt.date(2023, 9, 4) + dt.timedelta(days=k) for k in range(6)]
    history, events = run_trial(CFG, models, fault_plan=[Fault(d, "data_retrieval_failure", (2,)) for d in days])
    assert sum(r.excluded for r in history.records) == 12
    assert len(events.of("fallback_iii")) == 6


def test_trial_plan_outages():
    plan = trial_fault_plan(TrialConfig())
    outages = [f for f in plan if f.fault_type == "service_down"]
    assert [len(f.participants) for f in outages] == [23, 23, 24, 24]
    assert {f.date for f in outages} == {dt.date(2023, 11, 16), dt.date(2023, 11, 17),
                                         dt.date(2024, 1, 24), dt.date(2024, 1, 25)}


def test_trial_plan_report_matches(tmp_path):
    cfg = TrialConfig()
    models = gen_synthetic_models(cfg, seeding.stream(1, "env-models"))
    plan = trial_fault_plan(cfg)
    t0 = time.perf_counter()
    history, events = run_trial(cfg, models, fault_plan=plan)
    assert time.perf_counter() - t0 < 10
    rows = fault_report(events)
    assert [(r["date"], r["fault_type"], r["participants_affected"]) for r in rows] == \
        [(f.date.isoformat(), f.fault_type, len(f.participants)) for f in plan]
    assert all(r["fallback_events"] >= r["participants_affected"] or r["fault_type"] == "service_down"
               for r in rows)
