"""Post-deployment analyses: did-we-learn resampling, pooling comparison,
outcome and error metrics."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .bandit import BETA, PolicyMode, Prior, SmoothingConfig
from .environment import default_state_grid, make_null_environment
from .errors import AnalysisError, InputError, UndefinedStatisticError
from .features import env_from_alg
from .orchestrator import run_trial
from .trial import TrialConfig, TrialHistory

log = logging.getLogger(__name__)


def standardized_predicted_advantage(mu_beta, sigma_beta, f) -> float:
    """mu_beta' f / sqrt(f' Sigma_beta f)."""
    f = np.asarray(f, dtype=float)
    var = float(f @ np.asarray(sigma_beta, dtype=float) @ f)
    if not var > 0:
        raise UndefinedStatisticError(f"advantage variance {var} is not positive for state {f.tolist()}")
    return float(np.asarray(mu_beta, dtype=float) @ f) / math.sqrt(var)


@dataclass
class AdvantageTrajectory:
    taus: list  # (tau_index, date) pairs
    values: np.ndarray

    def __len__(self):
        return len(self.values)


def advantage_trajectory(snapshots, f) -> AdvantageTrajectory:
    snaps = sorted((s for s in snapshots if s.participant_id is None), key=lambda s: s.tau_index)
    values = np.array([standardized_predicted_advantage(s.mu[BETA], s.sigma[BETA, BETA], f) for s in snaps])
    return AdvantageTrajectory([(s.tau_index, s.date) for s in snaps], values)


@dataclass
class NullBand:
    taus: list
    rep_values: np.ndarray  # (reps, n_tau)
    q_low: np.ndarray
    q_high: np.ndarray
    levels: tuple = (0.025, 0.975)

    @property
    def reps(self) -> int:
        return self.rep_values.shape[0]

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values)
        return (self.q_low <= values) & (values <= self.q_high)


def quantile_band(rep_values, levels=(0.025, 0.975)):
    """Per-column linear-interpolation quantiles of a (reps, n) array."""
    rep_values = np.asarray(rep_values, dtype=float)
    if rep_values.shape[0] < 2:
        raise InputError("a band needs at least two repetitions")
    lo, hi = levels
    if not 0 <= lo <= hi <= 1:
        raise InputError(f"bad quantile levels {levels}")
    return (np.quantile(rep_values, lo, axis=0, method="linear"),
            np.quantile(rep_values, hi, axis=0, method="linear"))


def _rep_trajectory(args):
    config, models, f, seed, smoothing, prior = args
    history, _ = run_trial(config, models, PolicyMode.FULL_POOLING, smoothing, None, seed, prior)
    return advantage_trajectory(history.snapshots, f)


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def did_we_learn(reference_snapshots, env_models, query_state, reps: int, config: TrialConfig,
                 smoothing: SmoothingConfig = SmoothingConfig(), prior: Prior = Prior(),
                 grid=None, levels=(0.025, 0.975), master_seed: Optional[int] = None,
                 workers: int = 1) -> tuple[AdvantageTrajectory, NullBand]:
    """Compare a reference trajectory of the standardized predicted advantage
    at ``query_state`` with reruns in an environment that has no advantage there."""
    if reps < 2:
        raise InputError("did-we-learn needs at least two repetitions")
    if reps < 50:
        log.warning("only %d repetitions; quantile bands will be noisy", reps)
    f = np.asarray(query_state, dtype=float)
    if f.shape != (5,):
        raise InputError("query state must have 5 entries")
    reference = advantage_trajectory(reference_snapshots, f)
    null_models = make_null_environment(env_models, env_from_alg(f),
                                        default_state_grid() if grid is None else grid)
    seed = config.master_seed if master_seed is None else master_seed
    jobs = [(config, null_models, f, seeding.derive_seed(seed, "rep", r), smoothing, prior)
            for r in range(reps)]
    trajs = _map(_rep_trajectory, jobs, workers)
    ref_dates = [d for _, d in reference.taus]
    for k, tr in enumerate(trajs):
        if [d for _, d in tr.taus] != ref_dates:
            raise AnalysisError(f"update calendar of repetition {k} differs from the reference")
    values = np.vstack([tr.values for tr in trajs])
    q_low, q_high = quantile_band(values, levels)
    return reference, NullBand(reference.taus, values, q_low, q_high, tuple(levels))


def dwl_output(f, reference: AdvantageTrajectory, band: NullBand) -> dict:
    return {
        "state": list(map(float, f)),
        "taus": [{"tau_index": i, "date": d.isoformat()} for i, d in reference.taus],
        "reference": list(map(float, reference.values)),
        "band_low": list(map(float, band.q_low)),
        "band_high": list(map(float, band.q_high)),
        "rep_values": [list(map(float, row)) for row in band.rep_values],
    }


# ----------------------------------------------------------------- values

def _records(history):
    return history.records if isinstance(history, TrialHistory) else list(history)


def oscb_by_participant(history) -> dict:
    out: dict = {}
    for r in sorted(_records(history), key=lambda r: (r.participant_id, r.t)):
        out.setdefault(r.participant_id, []).append(float(r.oscb))
    return {pid: np.array(v) for pid, v in out.items()}


def first_quartile(values) -> float:
    """Linear interpolation at position 0.25 (N - 1) of the sorted values."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise InputError("no values")
    pos = 0.25 * (x.size - 1)
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    return float(x[lo] + (pos - lo) * (x[hi] - x[lo]))


def value_metrics(history, T: Optional[int] = None) -> dict:
    by_p = oscb_by_participant(history)
    if T is not None:
        short = [pid for pid, q in by_p.items() if len(q) != T]
        if short:
            raise AnalysisError(f"participants without {T} records: {short}")
    avgs = np.array([q.mean() for q in by_p.values()])
    return {"mean": float(avgs.mean()), "q1": first_quartile(avgs)}


@dataclass
class ValueSummary:
    mode: str
    mean: float
    mean_se: float
    q1: float
    q1_se: float
    reps: int
    single_rep: bool = False
    rep_means: list = field(default_factory=list, repr=False)
    rep_q1s: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {"mode": self.mode, "mean": self.mean, "mean_se": self.mean_se,
                "q1": self.q1, "q1_se": self.q1_se}


def _se(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(values.size))


def _pooling_rep(args):
    config, models, mode, seed, smoothing, prior = args
    history, _ = run_trial(config, models, mode, smoothing, None, seed, prior)
    return value_metrics(history, config.T)


def pooling_experiment(config: TrialConfig, env_models, reps: int,
                       modes: Sequence = (PolicyMode.FULL_POOLING, PolicyMode.NO_POOLING),
                       smoothing: SmoothingConfig = SmoothingConfig(), prior: Prior = Prior(),
                       master_seed: Optional[int] = None, workers: int = 1) -> list[ValueSummary]:
    """Paired comparison: repetition r uses the same seed for every mode."""
    if reps < 1:
        raise InputError("reps must be at least 1")
    if reps == 1:
        log.warning("single repetition: standard errors reported as 0")
    seed = config.master_seed if master_seed is None else master_seed
    rep_seeds = [seeding.derive_seed(seed, "rep", r) for r in range(reps)]
    out = []
    for mode in modes:
        mode = PolicyMode(mode)
        vals = _map(_pooling_rep, [(config, env_models, mode, s, smoothing, prior) for s in rep_seeds], workers)
        means = [v["mean"] for v in vals]
        q1s = [v["q1"] for v in vals]
        out.append(ValueSummary(mode.value, float(np.mean(means)), _se(means), float(np.mean(q1s)),
                                _se(q1s), reps, reps == 1, means, q1s))
    return out


# ---------------------------------------------------------------- metrics

def _var(values) -> Optional[float]:
    values = np.asarray(values, dtype=float)
    return float(values.var(ddof=1)) if values.size >= 2 else None


def outcome_metrics(history) -> dict:
    """Seven outcome summaries; undefined values are ``None``.

    Variances use the N - 1 divisor.  Participants with no non-zero outcome
    are left out of the per-participant non-zero averages and listed under
    ``participants_without_nonzero``.
    """
    by_p = oscb_by_participant(history)
    if not by_p:
        raise InputError("empty history")
    allq = np.concatenate(list(by_p.values()))
    nonzero = allq[allq > 0]
    nz_avgs, skipped = [], []
    for pid, q in by_p.items():
        pos = q[q > 0]
        if pos.size:
            nz_avgs.append(pos.mean())
        else:
            skipped.append(pid)
    avgs = [q.mean() for q in by_p.values()]
    part_vars = [_var(q) for q in by_p.values()]
    return {
        "proportion_zero": float(np.mean(allq == 0)),
        "avg_of_avg_nonzero_participant": float(np.mean(nz_avgs)) if nz_avgs else None,
        "avg_nonzero_in_trial": float(nonzero.mean()) if nonzero.size else None,
        "var_of_avg_nonzero_participant": _var(nz_avgs),
        "var_nonzero_in_trial": _var(nonzero),
        "var_of_avg_participant": _var(avgs),
        "avg_of_var_participant": float(np.mean(part_vars)) if None not in part_vars else None,
        "participants_without_nonzero": skipped,
    }


def error_metrics(sim_history, ref_history) -> dict:
    sim = {(r.participant_id, r.t): float(r.oscb) for r in _records(sim_history)}
    ref = {(r.participant_id, r.t): float(r.oscb) for r in _records(ref_history)}
    if sim.keys() != ref.keys():
        missing_sim = sorted(ref.keys() - sim.keys())
        missing_ref = sorted(sim.keys() - ref.keys())
        raise AnalysisError(
            f"histories not aligned; missing from simulated: {missing_sim[:10]}, "
            f"missing from reference: {missing_ref[:10]}"
        )
    if not sim:
        raise AnalysisError("empty histories")
    keys = sorted(sim)
    diff = np.array([sim[k] - ref[k] for k in keys])
    mse = float(np.mean(diff**2))
    return {"mse": mse, "rmse": math.sqrt(mse), "mae": float(np.mean(np.abs(diff)))}
