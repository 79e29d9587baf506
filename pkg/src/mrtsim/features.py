"""State features for the algorithm (5-vector) and the environment (7-vector)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

GAMMA = 13 / 14
WINDOW = 14
OSCB_CAP = 181.0
OSCB_MID = 90.5
DAY_MID = 35.5
DAY_HALF_RANGE = 34.5

ALG_FEATURES = ("time_of_day", "b_bar_norm", "a_bar_norm", "prior_day_app", "intercept")
ENV_FEATURES = ALG_FEATURES[:4] + ("day_of_week", "days_since_start_norm", "intercept")


@dataclass
class RawObservables:
    """Inputs for one decision time. Windows are most-recent-first."""

    slot: int
    past_oscb: np.ndarray = field(default_factory=lambda: np.zeros(WINDOW))
    past_actions: np.ndarray = field(default_factory=lambda: np.zeros(WINDOW))
    opened_app_prior_day: int = 0
    is_weekend: int = 0
    day_in_trial: int = 1


def exp_weights(gamma: float = GAMMA, n: int = WINDOW) -> np.ndarray:
    c = (1 - gamma) / (1 - gamma**n)
    return c * gamma ** np.arange(n)


def exp_average(window, gamma: float = GAMMA) -> float:
    """Normalized exponential average c_g * sum_j g^(j-1) window[j]."""
    w = np.asarray(window, dtype=float)
    if w.shape != (WINDOW,):
        raise InputError(f"window must have length {WINDOW}, got shape {w.shape}")
    return float(exp_weights(gamma) @ w)


def normalize_oscb_avg(seconds: float) -> float:
    if seconds < 0 or seconds > OSCB_CAP:
        warnings.warn(f"OSCB average {seconds} clamped to [0, {OSCB_CAP}]", RuntimeWarning, stacklevel=2)
        seconds = min(max(seconds, 0.0), OSCB_CAP)
    return (seconds - OSCB_MID) / OSCB_MID


def normalize_dosage_avg(fraction: float) -> float:
    if not 0.0 <= fraction <= 1.0:
        raise InputError(f"dosage fraction must be in [0, 1], got {fraction}")
    return (fraction - 0.5) / 0.5


def normalize_day(day_in_trial: int) -> float:
    return (day_in_trial - DAY_MID) / DAY_HALF_RANGE


def build_alg_state(raw: RawObservables) -> np.ndarray:
    if raw.slot not in (0, 1):
        raise InputError(f"slot must be 0 or 1, got {raw.slot}")
    if raw.opened_app_prior_day not in (0, 1):
        raise InputError("opened_app_prior_day must be 0 or 1")
    # float rounding of the weights can land a hair outside the valid range
    b_bar = min(exp_average(np.minimum(raw.past_oscb, OSCB_CAP)), OSCB_CAP)
    a_bar = min(max(exp_average(raw.past_actions), 0.0), 1.0)
    return np.array([
        float(raw.slot),
        normalize_oscb_avg(b_bar),
        normalize_dosage_avg(a_bar),
        float(raw.opened_app_prior_day),
        1.0,
    ])


def build_env_state(raw: RawObservables) -> np.ndarray:
    if not 1 <= raw.day_in_trial <= 70:
        raise InputError(f"day_in_trial must be in 1..70, got {raw.day_in_trial}")
    if raw.is_weekend not in (0, 1):
        raise InputError("is_weekend must be 0 or 1")
    f = build_alg_state(raw)
    return np.concatenate([f[:4], [float(raw.is_weekend), normalize_day(raw.day_in_trial), 1.0]])


def alg_from_env(g) -> np.ndarray:
    """Project an environment state onto the algorithm features."""
    g = np.asarray(g, dtype=float)
    return np.array([g[0], g[1], g[2], g[3], 1.0])


def env_from_alg(f, day_of_week: float = 0.0, days_since_start_norm: float = 0.0) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.array([f[0], f[1], f[2], f[3], day_of_week, days_since_start_norm, 1.0])
