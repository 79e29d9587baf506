"""Run configuration: trial constants plus prior, smoothing and experiment knobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

from .bandit import PolicyMode, Prior, SmoothingConfig
from .errors import InputError
from .trial import TrialConfig

_TRIAL_KEYS = {f.name for f in fields(TrialConfig)}


@dataclass(frozen=True)
class RunConfig:
    trial: TrialConfig = field(default_factory=TrialConfig)
    prior: Prior = field(default_factory=Prior)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    policy_mode: PolicyMode = PolicyMode.FULL_POOLING
    fault_plan: Optional[str] = None
    reps: int = 500
    restarts: int = 5
    workers: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "policy_mode", PolicyMode(self.policy_mode))
        for name in ("reps", "restarts", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")

    def to_dict(self) -> dict:
        d = self.trial.to_dict()
        d.update({
            "prior": self.prior.to_dict(),
            "smoothing": self.smoothing.to_dict(),
            "policy_mode": self.policy_mode.value,
            "fault_plan": self.fault_plan,
            "reps": self.reps,
            "restarts": self.restarts,
            "workers": self.workers,
            "out_dir": self.out_dir,
        })
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("config must be a JSON object")
        own = {f.name for f in fields(cls)} - {"trial"}
        unknown = sorted(set(d) - own - _TRIAL_KEYS)
        if unknown:
            raise InputError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            kw = {k: v for k, v in d.items() if k in own}
            if "prior" in kw:
                kw["prior"] = Prior.from_dict(kw["prior"])
            if "smoothing" in kw:
                kw["smoothing"] = SmoothingConfig.from_dict(kw["smoothing"])
            trial = TrialConfig.from_dict({k: v for k, v in d.items() if k in _TRIAL_KEYS})
            return cls(trial=trial, **kw)
        except TypeError as exc:
            raise InputError(str(exc)) from None
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)
