"""Trial calendar, recruitment, decision indexing and the history store."""

from __future__ import annotations

import calendar
import csv
import datetime as dt
from dataclasses import dataclass, field, fields
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import InputError
from .serialize import fmt_float, read_jsonl, write_jsonl

WEEKDAYS = [d.lower() for d in calendar.day_name]  # monday .. sunday
FALLBACK_LABELS = ("none", "method_i", "method_ii")


def _parse_weekday(value) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= int(value) <= 6:
            raise InputError(f"weekday index out of range: {value}")
        return int(value)
    try:
        return WEEKDAYS.index(str(value).strip().lower())
    except ValueError:
        raise InputError(f"unknown weekday: {value!r}") from None


def _parse_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise InputError(f"bad calendar date: {value!r}") from None


@dataclass(frozen=True)
class TrialConfig:
    num_participants: int = 72
    days_per_participant: int = 70
    decisions_per_day: int = 2
    cohort_size: int = 5
    cohort_interval_days: int = 14
    trial_start_date: dt.date = dt.date(2023, 9, 1)
    update_weekday: str = "sunday"
    master_seed: int = 0
    reward_cost_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "trial_start_date", _parse_date(self.trial_start_date))
        object.__setattr__(self, "update_weekday", WEEKDAYS[_parse_weekday(self.update_weekday)])
        for name in ("num_participants", "days_per_participant", "decisions_per_day",
                     "cohort_size", "cohort_interval_days"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.decisions_per_day != 2:
            raise InputError("decisions_per_day must be 2 (morning and evening slots)")
        if self.reward_cost_weight < 0:
            raise InputError("reward_cost_weight must be nonnegative")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "reward_cost_weight", float(self.reward_cost_weight))

    @property
    def T(self) -> int:
        return self.days_per_participant * self.decisions_per_day

    @property
    def update_weekday_index(self) -> int:
        return WEEKDAYS.index(self.update_weekday)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["trial_start_date"] = self.trial_start_date.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown trial config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DecisionPoint:
    participant_id: int
    t: int
    date: dt.date
    slot: int

    @property
    def day_index(self) -> int:
        return (self.t - 1) // 2 + 1


def decision_index(day_index: int, slot: int) -> int:
    """Decision index t in 1..T for a 1-based day and a 0/1 slot."""
    return 2 * (day_index - 1) + slot + 1


@dataclass
class DecisionRecord:
    participant_id: int
    t: int
    date: dt.date
    slot: int
    alg_state: tuple
    env_state: tuple
    pi: float
    action: int
    oscb: int
    reward: float
    fallback: str = "none"
    excluded: bool = False

    def __post_init__(self):
        if self.fallback not in FALLBACK_LABELS:
            raise InputError(f"unknown fallback label {self.fallback!r}")
        if not 0.0 <= self.pi <= 1.0:
            raise InputError(f"probability out of range: {self.pi}")
        if self.oscb < 0:
            raise InputError("oscb must be nonnegative")


@dataclass
class PosteriorSnapshot:
    tau_index: int
    date: dt.date
    mu: np.ndarray
    sigma: np.ndarray
    participant_id: Optional[int] = None

    def to_json(self) -> dict:
        row = {"tau_index": self.tau_index, "date": self.date.isoformat()}
        if self.participant_id is not None:
            row["participant_id"] = self.participant_id
        row["mu"] = list(map(float, self.mu))
        row["sigma"] = [list(map(float, r)) for r in self.sigma]
        return row

    @classmethod
    def from_json(cls, row: dict) -> "PosteriorSnapshot":
        return cls(
            tau_index=int(row["tau_index"]),
            date=_parse_date(row["date"]),
            mu=np.asarray(row["mu"], dtype=float),
            sigma=np.asarray(row["sigma"], dtype=float),
            participant_id=row.get("participant_id"),
        )


@dataclass
class TrialHistory:
    """Append-only decision records plus posterior snapshots.

    Records are indexed by participant so that per-participant batches
    (no-pooling updates) do not scan the whole trial.
    """

    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    start_dates: dict = field(default_factory=dict)
    _by_participant: dict = field(default_factory=dict, repr=False)
    _keys: set = field(default_factory=set, repr=False)

    def append(self, record: DecisionRecord) -> None:
        key = (record.participant_id, record.t)
        if key in self._keys:
            raise InputError(f"duplicate record for participant {key[0]} t={key[1]}")
        self._keys.add(key)
        self.records.append(record)
        self._by_participant.setdefault(record.participant_id, []).append(record)

    def participant_records(self, participant_id: int) -> list:
        return self._by_participant.get(participant_id, [])

    def participants(self) -> list:
        return sorted(self._by_participant)

    def add_snapshot(self, snap: PosteriorSnapshot) -> None:
        for prev in reversed(self.snapshots):
            if prev.participant_id == snap.participant_id:
                if snap.tau_index <= prev.tau_index or snap.date <= prev.date:
                    raise InputError("posterior snapshots must be strictly ordered by update time")
                break
        self.snapshots.append(snap)

    def snapshots_for(self, participant_id: Optional[int] = None) -> list:
        return [s for s in self.snapshots if s.participant_id == participant_id]


class UpdateTime(NamedTuple):
    index: int
    date: dt.date


def participant_end(start: dt.date, config: TrialConfig) -> dt.date:
    return start + dt.timedelta(days=config.days_per_participant - 1)


def recruitment_schedule(config: TrialConfig) -> list[tuple[int, dt.date]]:
    """Participants 1..N in cohorts of ``cohort_size`` every ``cohort_interval_days``."""
    out = []
    for pid in range(1, config.num_participants + 1):
        cohort = (pid - 1) // config.cohort_size
        start = config.trial_start_date + dt.timedelta(days=cohort * config.cohort_interval_days)
        out.append((pid, start))
    return out


def trial_span(config: TrialConfig, start_dates: Optional[Iterable[dt.date]] = None):
    starts = list(start_dates) if start_dates is not None else [s for _, s in recruitment_schedule(config)]
    if not starts:
        raise InputError("no participants recruited")
    return min(starts), participant_end(max(starts), config)


def update_times(config: TrialConfig, history: Optional[TrialHistory] = None) -> list[UpdateTime]:
    """Weekly update instants from the first update weekday after the trial
    start through the last participant's final day."""
    starts = None
    if history is not None and history.start_dates:
        starts = history.start_dates.values()
    first, last = trial_span(config, starts)
    first = min(first, config.trial_start_date)
    ahead = (config.update_weekday_index - first.weekday()) % 7 or 7
    day = first + dt.timedelta(days=ahead)
    out = []
    while day <= last:
        out.append(UpdateTime(len(out) + 1, day))
        day += dt.timedelta(days=7)
    return out


def batch_for_update(history: TrialHistory, tau, participant_id: Optional[int] = None) -> list:
    """(alg_state, pi, action, reward) for every non-excluded record dated
    strictly before the update date, optionally for one participant only."""
    tau_date = tau.date if isinstance(tau, UpdateTime) else _parse_date(tau)
    source = history.records if participant_id is None else history.participant_records(participant_id)
    return [
        (r.alg_state, r.pi, r.action, r.reward)
        for r in source
        if r.date < tau_date and not r.excluded
    ]


# --------------------------------------------------------------------- files

HISTORY_COLUMNS = (
    ["participant_id", "t", "date", "slot"]
    + [f"f{k}" for k in range(1, 6)]
    + [f"g{k}" for k in range(1, 8)]
    + ["pi", "action", "fallback", "excluded", "oscb", "reward"]
)


def write_history_csv(history: TrialHistory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            w.writerow(
                [r.participant_id, r.t, r.date.isoformat(), r.slot]
                + [fmt_float(x) for x in r.alg_state]
                + [fmt_float(x) for x in r.env_state]
                + [fmt_float(r.pi), r.action, r.fallback, int(r.excluded), r.oscb, fmt_float(r.reward)]
            )


def read_history_csv(path) -> list[DecisionRecord]:
    """Parse a history file; malformed rows raise one InputError naming every bad row."""
    records, bad = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in HISTORY_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"history file is missing columns: {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(DecisionRecord(
                    participant_id=int(row["participant_id"]),
                    t=int(row["t"]),
                    date=dt.date.fromisoformat(row["date"]),
                    slot=int(row["slot"]),
                    alg_state=tuple(float(row[f"f{k}"]) for k in range(1, 6)),
                    env_state=tuple(float(row[f"g{k}"]) for k in range(1, 8)),
                    pi=float(row["pi"]),
                    action=int(row["action"]),
                    oscb=int(float(row["oscb"])),
                    reward=float(row["reward"]),
                    fallback=row["fallback"],
                    excluded=bool(int(row["excluded"])),
                ))
            except (TypeError, ValueError):
                bad.append(lineno)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise InputError(f"malformed history rows (line numbers): {shown}")
    return records


def history_from_records(records: Iterable[DecisionRecord]) -> TrialHistory:
    h = TrialHistory()
    for r in records:
        h.append(r)
    return h


def write_snapshots_jsonl(snapshots, path) -> None:
    write_jsonl(path, (s.to_json() for s in snapshots))


def read_snapshots_jsonl(path) -> list[PosteriorSnapshot]:
    return [PosteriorSnapshot.from_json(row) for row in read_jsonl(path)]
