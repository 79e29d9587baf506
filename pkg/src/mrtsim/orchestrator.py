"""Day-by-day replay of the deployed pipeline with fault injection.

Each simulated morning runs the daily job (ingest the previous day's data,
then build states and push a fresh schedule to every active participant).
On the update weekday the weekly job refits the posterior first, so that
day's schedules already use it.  Faults switch individual participants onto
one of three fallbacks:

* ``service_down``  -> method (i): act from the last schedule pushed
* ``schedule_construction_failure`` -> method (ii): coin-flip schedule
* ``data_retrieval_failure`` -> method (iii): store the day's records but
  keep them out of every update batch
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import seeding
from .bandit import (ActionSchedule, PolicyMode, Prior, SmoothingConfig, fit_posterior,
                     make_schedule, no_cost, reward)
from .environment import ParticipantEnvModel, app_open_sample, zip_sample
from .errors import InputError, SetupError
from .features import WINDOW, RawObservables, build_alg_state, build_env_state
from .serialize import write_jsonl
from .trial import (DecisionRecord, PosteriorSnapshot, TrialConfig, TrialHistory,
                    batch_for_update, decision_index, participant_end,
                    recruitment_schedule, trial_span, update_times)

log = logging.getLogger(__name__)

FAULT_TYPES = ("service_down", "schedule_construction_failure", "data_retrieval_failure")
FAULT_FALLBACK = {
    "service_down": "fallback_i",
    "schedule_construction_failure": "fallback_ii",
    "data_retrieval_failure": "fallback_iii",
}
EVENT_TYPES = ("recruit", "daily_job", "schedule_pushed", "fallback_i", "fallback_ii",
               "fallback_iii", "policy_update", "fault_injected")


@dataclass(frozen=True)
class Fault:
    date: dt.date
    fault_type: str
    participants: Union[str, tuple] = "all"

    def __post_init__(self):
        if isinstance(self.date, str):
            object.__setattr__(self, "date", dt.date.fromisoformat(self.date))
        if self.fault_type not in FAULT_TYPES:
            raise InputError(f"unknown fault type {self.fault_type!r}")
        if self.participants != "all":
            object.__setattr__(self, "participants", tuple(int(p) for p in self.participants))

    def to_json(self) -> dict:
        return {"date": self.date.isoformat(), "fault_type": self.fault_type,
                "participants": self.participants if self.participants == "all" else list(self.participants)}


class FaultPlan(list):
    """A list of :class:`Fault` entries."""

    @classmethod
    def from_json(cls, rows) -> "FaultPlan":
        try:
            return cls(Fault(r["date"], r["fault_type"], r.get("participants", "all")) for r in rows)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad fault plan entry: {exc}") from None

    @classmethod
    def load(cls, path) -> "FaultPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> list:
        return [f.to_json() for f in self]


class EventLog(list):
    def log(self, date: dt.date, event: str, participant_id: Optional[int] = None, detail=None):
        if event not in EVENT_TYPES:
            raise InputError(f"unknown event type {event!r}")
        if self and date < self[-1]["date_obj"]:
            raise InputError("event log must be chronological")
        self.append({"date_obj": date, "event": event, "participant_id": participant_id, "detail": detail})

    def rows(self) -> list[dict]:
        return [{"date": e["date_obj"].isoformat(), "event": e["event"],
                 "participant_id": e["participant_id"], "detail": e["detail"]} for e in self]

    def of(self, event: str) -> list[dict]:
        return [e for e in self if e["event"] == event]

    def write(self, path) -> None:
        write_jsonl(path, self.rows())

    @classmethod
    def from_rows(cls, rows) -> "EventLog":
        out = cls()
        for r in rows:
            out.log(dt.date.fromisoformat(r["date"]), r["event"], r.get("participant_id"), r.get("detail"))
        return out


def apply_fallback_ii(participant_id: Optional[int], horizon_days: int, rng: np.random.Generator,
                      start_day: int = 1) -> ActionSchedule:
    """Schedule ignoring policy and state: every action is a fair coin."""
    if horizon_days < 1:
        raise InputError("horizon must be at least one day")
    probs = np.full((horizon_days, 2), 0.5)
    actions = (rng.random(probs.shape) < 0.5).astype(int)
    return ActionSchedule(start_day, probs, actions, "fallback_ii", None, participant_id)


def apply_fallback_iii(record: DecisionRecord) -> DecisionRecord:
    return dataclasses.replace(record, excluded=True)


@dataclass
class _Participant:
    pid: int
    start: dt.date
    end: dt.date
    model: ParticipantEnvModel
    rng_action: np.random.Generator
    rng_outcome: np.random.Generator
    rng_app: np.random.Generator
    rng_fallback: np.random.Generator
    oscb: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    app_prev: int = 0
    schedule: Optional[ActionSchedule] = None

    def window(self, values: list) -> np.ndarray:
        recent = values[::-1][:WINDOW]
        return np.array(recent + [0.0] * (WINDOW - len(recent)), dtype=float)


def _fault_index(plan: Sequence[Fault], participants: dict, first: dt.date, last: dt.date) -> dict:
    index: dict = defaultdict(set)
    for f in plan:
        if not first <= f.date <= last:
            raise SetupError(f"fault date {f.date} outside trial span {first}..{last}")
        active = [p.pid for p in participants.values() if p.start <= f.date <= p.end]
        targets = active if f.participants == "all" else list(f.participants)
        for pid in targets:
            if pid not in active:
                raise SetupError(f"fault on {f.date} targets participant {pid}, not active that day")
            index[(f.date, pid)].add(f.fault_type)
    return index


def run_trial(config: TrialConfig, env_models: Sequence[ParticipantEnvModel],
              policy_mode: PolicyMode = PolicyMode.FULL_POOLING,
              smoothing_cfg: SmoothingConfig = SmoothingConfig(),
              fault_plan: Optional[Iterable[Fault]] = None,
              master_seed: Optional[int] = None,
              prior: Prior = Prior(),
              cost_hook: Callable[[float, int], float] = no_cost) -> tuple[TrialHistory, EventLog]:
    """Simulate the whole trial; deterministic given its arguments."""
    if len(env_models) < config.num_participants:
        raise SetupError(f"{len(env_models)} environment models for {config.num_participants} participants")
    policy_mode = PolicyMode(policy_mode)
    seed = config.master_seed if master_seed is None else int(master_seed)
    plan = list(fault_plan or [])

    participants = {}
    for pid, start in recruitment_schedule(config):
        participants[pid] = _Participant(
            pid, start, participant_end(start, config), env_models[pid - 1],
            seeding.stream(seed, "action", pid), seeding.stream(seed, "outcome", pid),
            seeding.stream(seed, "app", pid), seeding.stream(seed, "fallback", pid),
        )
    history = TrialHistory(start_dates={p.pid: p.start for p in participants.values()})
    events = EventLog()
    first, last = trial_span(config)
    faults = _fault_index(plan, participants, first, last)
    faults_by_date = defaultdict(list)
    for f in plan:
        faults_by_date[f.date].append(f)
    taus = {u.date: u for u in update_times(config, history)}

    pooled = prior.state()
    personal = {pid: prior.state() for pid in participants}

    day = first
    while day <= last:
        active = [p for p in participants.values() if p.start <= day <= p.end]
        events.log(day, "daily_job", None, {"active": len(active)})

        if day in taus:
            tau = taus[day]
            if policy_mode is PolicyMode.FULL_POOLING:
                batch = batch_for_update(history, tau)
                pooled = fit_posterior(prior, batch, tau.index)
                history.add_snapshot(PosteriorSnapshot(tau.index, day, pooled.mu, pooled.sigma))
                events.log(day, "policy_update", None, {"tau_index": tau.index, "batch_size": len(batch)})
            else:
                n = 0
                for p in participants.values():
                    if p.start < day <= p.end + dt.timedelta(days=1):
                        batch = batch_for_update(history, tau, p.pid)
                        personal[p.pid] = fit_posterior(prior, batch, tau.index)
                        post = personal[p.pid]
                        history.add_snapshot(PosteriorSnapshot(tau.index, day, post.mu, post.sigma, p.pid))
                        n += 1
                events.log(day, "policy_update", None, {"tau_index": tau.index, "participants": n})

        for f in faults_by_date.get(day, []):
            ids = [p.pid for p in active] if f.participants == "all" else list(f.participants)
            events.log(day, "fault_injected", None, {"fault_type": f.fault_type, "participants": ids})

        for p in active:
            d = (day - p.start).days + 1
            if d == 1:
                events.log(day, "recruit", p.pid, None)
            raw = RawObservables(
                slot=0,
                past_oscb=p.window(p.oscb),
                past_actions=p.window(p.actions),
                opened_app_prior_day=p.app_prev,
                is_weekend=int(day.weekday() >= 5),
                day_in_trial=d,
            )
            f0 = build_alg_state(raw)
            g0 = build_env_state(raw)
            kinds = faults.get((day, p.pid), set())
            horizon = config.days_per_participant - d + 1

            if "service_down" in kinds and p.schedule is not None and p.schedule.covers(d):
                sched, fallback = p.schedule, "method_i"
                events.log(day, "fallback_i", p.pid, {"schedule_start_day": p.schedule.start_day})
            elif kinds & {"service_down", "schedule_construction_failure"}:
                sched, fallback = apply_fallback_ii(p.pid, horizon, p.rng_fallback, start_day=d), "method_ii"
                reason = "schedule_construction_failure" if "schedule_construction_failure" in kinds \
                    else "service_down_without_prior_schedule"
                events.log(day, "fallback_ii", p.pid, {"reason": reason})
            else:
                post = pooled if policy_mode is PolicyMode.FULL_POOLING else personal[p.pid]
                sched = make_schedule(post, f0, horizon, smoothing_cfg, p.rng_action,
                                      start_day=d, participant_id=p.pid)
                fallback = "none"
            if "service_down" not in kinds:
                p.schedule = sched
                events.log(day, "schedule_pushed", p.pid, {"provenance": sched.provenance, "entries": len(sched)})

            excluded = "data_retrieval_failure" in kinds
            if excluded:
                events.log(day, "fallback_iii", p.pid, {"records": 2})

            for slot in (0, 1):
                pi, a = sched.entry(d, slot)
                f = f0.copy()
                g = g0.copy()
                f[0] = g[0] = slot
                q = zip_sample(p.model, g, a, p.rng_outcome)
                rec = DecisionRecord(
                    participant_id=p.pid, t=decision_index(d, slot), date=day, slot=slot,
                    alg_state=tuple(map(float, f)), env_state=tuple(map(float, g)),
                    pi=pi, action=a, oscb=q, reward=reward(q, config, a, cost_hook),
                    fallback=fallback,
                )
                if excluded:
                    rec = apply_fallback_iii(rec)
                history.append(rec)
                p.oscb.append(float(q))
                p.actions.append(float(a))

            p.app_prev = app_open_sample(p.model.p_app, p.rng_app)

        day += dt.timedelta(days=1)
    return history, events


def fault_report(event_log: EventLog) -> list[dict]:
    """One row per injected fault (date, type) with the fallbacks it triggered."""
    fallbacks = defaultdict(int)
    for e in event_log:
        if e["event"].startswith("fallback_"):
            fallbacks[(e["date_obj"], e["event"])] += 1
    rows = []
    for e in event_log.of("fault_injected"):
        kind = e["detail"]["fault_type"]
        method = FAULT_FALLBACK[kind]
        rows.append({
            "date": e["date_obj"].isoformat(),
            "fault_type": kind,
            "fallback_method": method,
            "participants_affected": len(e["detail"]["participants"]),
            "fallback_events": fallbacks[(e["date_obj"], method)],
        })
    return rows


def fallback_totals(event_log: EventLog) -> dict:
    """Participant-day count per fallback method."""
    return {m: len(event_log.of(m)) for m in ("fallback_i", "fallback_ii", "fallback_iii")}


# Issue table from the deployed trial. Three dates printed with year 2024 lie
# inside November/December 2023 runs of the same issue and are read as 2023.
TRIAL_ISSUES = [
    (1, "2023-10-30", "schedule_construction_failure", 1),
    (2, "2023-11-16", "service_down", 23),
    (2, "2023-11-17", "service_down", 23),
    (3, "2023-11-17", "schedule_construction_failure", 1),
    (4, "2023-11-25", "data_retrieval_failure", 1),
    (4, "2023-11-26", "data_retrieval_failure", 1),
    (4, "2023-11-27", "data_retrieval_failure", 1),
    (4, "2023-11-28", "data_retrieval_failure", 1),
    (4, "2023-11-29", "data_retrieval_failure", 1),
    (4, "2023-11-30", "data_retrieval_failure", 1),
    (5, "2023-12-15", "data_retrieval_failure", 1),
    (5, "2023-12-16", "data_retrieval_failure", 1),
    (6, "2024-01-24", "service_down", 24),
    (6, "2024-01-25", "service_down", 24),
    (7, "2024-02-21", "schedule_construction_failure", 5),
]


def trial_fault_plan(config: TrialConfig = TrialConfig()) -> FaultPlan:
    """Transcribe the trial's issue table onto this config's calendar.

    Outages take the lowest-numbered active participants; single-participant
    issues take the highest-numbered participants active on every date of the
    issue, so the two never collide on a shared date.
    """
    starts = dict(recruitment_schedule(config))

    def active_on(dates):
        return [pid for pid, s in starts.items()
                if all(s <= d <= participant_end(s, config) for d in dates)]

    by_issue = defaultdict(list)
    for issue, date, kind, count in TRIAL_ISSUES:
        by_issue[issue].append((dt.date.fromisoformat(date), kind, count))
    plan = FaultPlan()
    for issue, rows in by_issue.items():
        kind, count = rows[0][1], rows[0][2]
        if kind == "service_down":
            for date, _, n in rows:
                pool = active_on([date])
                if len(pool) < n:
                    raise SetupError(f"only {len(pool)} participants active on {date}, need {n}")
                plan.append(Fault(date, kind, tuple(sorted(pool)[:n])))
        else:
            pool = sorted(active_on([r[0] for r in rows]))
            if len(pool) < count:
                raise SetupError(f"issue {issue}: only {len(pool)} participants span its dates")
            chosen = tuple(pool[-count:])
            for date, _, _ in rows:
                plan.append(Fault(date, kind, chosen))
    plan.sort(key=lambda f: f.date)
    return FaultPlan(plan)
