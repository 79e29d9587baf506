"""Action-centered Bayesian linear regression with smoothed posterior sampling.

The reward model is

    r(s, a) = f(s)' alpha0 + pi f(s)' alpha1 + (a - pi) f(s)' beta + eps,
    eps ~ N(0, sigma2),

with a Gaussian prior on theta = [alpha0, alpha1, beta] (5 + 5 + 5).  The
advantage of sending a prompt is f(s)' beta, and the action probability is
E[rho(f(s)' beta)] under the posterior, with rho a bounded logistic.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import InputError, NumericalError

P = 5  # algorithm state dimension
BETA = slice(10, 15)


class PolicyMode(str, enum.Enum):
    FULL_POOLING = "full_pooling"
    NO_POOLING = "no_pooling"


@dataclass(frozen=True)
class Prior:
    sigma2: float = 3878.0
    mu_alpha0: tuple = (18.0, 0.0, 30.0, 0.0, 73.0)
    sd_alpha0: tuple = (73.0, 25.0, 95.0, 27.0, 83.0)
    mu_beta: tuple = (0.0, 0.0, 0.0, 53.0, 0.0)
    sd_beta: tuple = (12.0, 33.0, 35.0, 56.0, 17.0)

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise InputError("noise variance must be positive")
        for name in ("mu_alpha0", "sd_alpha0", "mu_beta", "sd_beta"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != P:
                raise InputError(f"{name} must have {P} entries")
            object.__setattr__(self, name, v)
        if min(self.sd_alpha0 + self.sd_beta) <= 0:
            raise InputError("prior standard deviations must be positive")
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def mean(self) -> np.ndarray:
        # alpha1 reuses the advantage prior
        return np.array(self.mu_alpha0 + self.mu_beta + self.mu_beta)

    @property
    def cov(self) -> np.ndarray:
        return np.diag(np.square(self.sd_alpha0 + self.sd_beta + self.sd_beta))

    def state(self) -> "PosteriorState":
        return PosteriorState(self.mean, self.cov, tau_index=0)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Prior":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise InputError(f"unknown prior key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class PosteriorState:
    mu: np.ndarray
    sigma: np.ndarray
    tau_index: int = 0

    @property
    def mu_beta(self) -> np.ndarray:
        return self.mu[BETA]

    @property
    def sigma_beta(self) -> np.ndarray:
        return self.sigma[BETA, BETA]


@dataclass(frozen=True)
class SmoothingConfig:
    l_min: float = 0.2
    l_max: float = 0.8
    steepness: float = 0.05
    quadrature_nodes: int = 50

    def __post_init__(self):
        if not 0 < self.l_min < self.l_max < 1:
            raise InputError("need 0 < l_min < l_max < 1")
        if self.steepness <= 0:
            raise InputError("steepness must be positive")
        if int(self.quadrature_nodes) != self.quadrature_nodes or self.quadrature_nodes < 1:
            raise InputError("quadrature_nodes must be a positive integer")
        object.__setattr__(self, "quadrature_nodes", int(self.quadrature_nodes))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise InputError(f"unknown smoothing key(s): {', '.join(unknown)}")
        return cls(**d)


# ------------------------------------------------------------ reward model

def design_vector(f, action: int, pi: float) -> np.ndarray:
    """[f, pi f, (a - pi) f] so that phi' theta is the centered reward model."""
    if not 0.0 <= pi <= 1.0:
        raise InputError(f"probability out of range: {pi}")
    f = np.asarray(f, dtype=float)
    return np.concatenate([f, pi * f, (action - pi) * f])


def design_matrix(states, pis, actions) -> np.ndarray:
    F = np.asarray(states, dtype=float).reshape(-1, P)
    pis = np.asarray(pis, dtype=float)[:, None]
    acts = np.asarray(actions, dtype=float)[:, None]
    return np.hstack([F, pis * F, (acts - pis) * F])


def _cholesky(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh((mat + mat.T) / 2)
        raise NumericalError(
            f"{what} is not positive definite (min eigenvalue {eig.min():.3e}, "
            f"asymmetry {np.abs(mat - mat.T).max():.3e})"
        ) from None


def posterior_from_arrays(mu, sigma, sigma2, Phi, R) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = mu.shape[0]
    if sigma.shape != (d, d):
        raise InputError(f"covariance shape {sigma.shape} does not match mean length {d}")
    Phi = np.asarray(Phi, dtype=float).reshape(-1, d)
    R = np.asarray(R, dtype=float).reshape(-1)
    if Phi.shape[0] != R.shape[0]:
        raise InputError("design rows and rewards differ in length")
    if sigma2 <= 0:
        raise InputError("noise variance must be positive")
    L0 = _cholesky(sigma, "prior covariance")
    if Phi.shape[0] == 0:
        return mu.copy(), sigma.copy()
    eye = np.eye(d)
    prec0 = linalg.cho_solve((L0, True), eye)
    prec = prec0 + Phi.T @ Phi / sigma2
    prec = (prec + prec.T) / 2
    L = _cholesky(prec, "posterior precision")
    sigma_post = linalg.cho_solve((L, True), eye)
    sigma_post = (sigma_post + sigma_post.T) / 2
    mu_post = linalg.cho_solve((L, True), prec0 @ mu + Phi.T @ R / sigma2)
    return mu_post, sigma_post


def posterior_update(prior_or_current, sigma2: float, batch) -> PosteriorState:
    """Conjugate Gaussian update with known noise variance.

    ``prior_or_current`` is a ``PosteriorState`` or a ``(mu, sigma)`` pair;
    ``batch`` is a sequence of ``(design_vector, reward)`` pairs.
    """
    if isinstance(prior_or_current, PosteriorState):
        mu, sigma, tau = prior_or_current.mu, prior_or_current.sigma, prior_or_current.tau_index
    else:
        (mu, sigma), tau = prior_or_current, 0
    d = len(mu)
    batch = list(batch)
    Phi = np.array([b[0] for b in batch], dtype=float).reshape(-1, d)
    R = np.array([b[1] for b in batch], dtype=float)
    mu_post, sigma_post = posterior_from_arrays(mu, sigma, sigma2, Phi, R)
    return PosteriorState(mu_post, sigma_post, tau_index=tau)


def fit_posterior(prior: Prior, batch, tau_index: int = 0) -> PosteriorState:
    """Posterior from the prior and a history batch of
    ``(alg_state, pi, action, reward)`` tuples."""
    if batch:
        states, pis, actions, rewards = zip(*batch)
        Phi = design_matrix(states, pis, actions)
    else:
        Phi, rewards = np.zeros((0, 3 * P)), ()
    mu, sigma = posterior_from_arrays(prior.mean, prior.cov, prior.sigma2, Phi, rewards)
    return PosteriorState(mu, sigma, tau_index=tau_index)


# ------------------------------------------------------- action selection

def advantage_distribution(posterior: PosteriorState, f) -> tuple[float, float]:
    f = np.asarray(f, dtype=float)
    m = float(posterior.mu_beta @ f)
    v = float(f @ posterior.sigma_beta @ f)
    return m, v


def smoothing_rho(x, cfg: SmoothingConfig = SmoothingConfig()):
    return cfg.l_min + (cfg.l_max - cfg.l_min) * expit(cfg.steepness * np.asarray(x, dtype=float))


@lru_cache(maxsize=16)
def _hermgauss(n: int):
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, w / np.sqrt(np.pi)


def expected_rho(m: float, v: float, cfg: SmoothingConfig = SmoothingConfig()) -> float:
    """E[rho(X)] for X ~ N(m, v) by Gauss-Hermite quadrature."""
    if v < 0:
        warnings.warn(f"negative advantage variance {v:.3e} clamped to 0", RuntimeWarning, stacklevel=2)
        v = 0.0
    if v == 0:
        return float(smoothing_rho(m, cfg))
    x, w = _hermgauss(cfg.quadrature_nodes)
    val = float(w @ smoothing_rho(m + np.sqrt(2.0 * v) * x, cfg))
    return min(max(val, cfg.l_min), cfg.l_max)


def action_prob(posterior: PosteriorState, f, cfg: SmoothingConfig = SmoothingConfig()) -> float:
    m, v = advantage_distribution(posterior, f)
    return expected_rho(m, v, cfg)


def select_action(pi: float, rng: np.random.Generator) -> int:
    if not 0.0 <= pi <= 1.0:
        raise InputError(f"probability out of range: {pi}")
    return int(rng.random() < pi)


@dataclass
class ActionSchedule:
    """Per-(day, slot) probabilities and sampled actions from ``start_day`` on."""

    start_day: int
    probs: np.ndarray  # shape (days, 2)
    actions: np.ndarray  # shape (days, 2)
    provenance: str = "policy"
    alg_state: Optional[np.ndarray] = None
    participant_id: Optional[int] = None

    @property
    def horizon_days(self) -> int:
        return self.probs.shape[0]

    @property
    def end_day(self) -> int:
        return self.start_day + self.horizon_days - 1

    def __len__(self) -> int:
        return self.probs.size

    def covers(self, day: int) -> bool:
        return self.start_day <= day <= self.end_day

    def entry(self, day: int, slot: int) -> tuple[float, int]:
        if not self.covers(day):
            raise InputError(f"schedule for days {self.start_day}..{self.end_day} has no day {day}")
        k = day - self.start_day
        return float(self.probs[k, slot]), int(self.actions[k, slot])

    def entries(self):
        for k in range(self.horizon_days):
            for slot in (0, 1):
                yield self.start_day + k, slot, float(self.probs[k, slot]), int(self.actions[k, slot])


def make_schedule(posterior: PosteriorState, participant_state, horizon_days: int,
                  cfg: SmoothingConfig, rng: np.random.Generator, start_day: int = 1,
                  participant_id: Optional[int] = None) -> ActionSchedule:
    """Schedule from the participant's latest state; only time of day varies by slot."""
    if horizon_days < 1:
        raise InputError("horizon must be at least one day")
    f = np.array(participant_state, dtype=float)
    slot_probs = []
    for slot in (0, 1):
        f_slot = f.copy()
        f_slot[0] = slot
        slot_probs.append(action_prob(posterior, f_slot, cfg))
    probs = np.tile(slot_probs, (horizon_days, 1))
    actions = (rng.random(probs.shape) < probs).astype(int)
    return ActionSchedule(start_day, probs, actions, "policy", f, participant_id)


# ------------------------------------------------------------------ reward

def no_cost(oscb: float, action: int) -> float:
    return 0.0


def reward(oscb: float, config=None, action: int = 0,
           cost_hook: Callable[[float, int], float] = no_cost) -> float:
    """OSCB minus ``reward_cost_weight`` times a pluggable cost term."""
    if oscb < 0:
        raise InputError("oscb must be nonnegative")
    weight = 0.0 if config is None else getattr(config, "reward_cost_weight", 0.0)
    if weight == 0:
        return float(oscb)
    return float(oscb) - weight * cost_hook(oscb, action)
