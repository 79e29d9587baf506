"""Participant environment: zero-inflated Poisson outcomes, app engagement,
MAP fitting and null-environment construction.

Outcome model for environment state g and action a::

    Z ~ Bernoulli(1 - sigmoid(g'w_b - a * max(g'delta_b, 0)))
    S ~ Poisson(exp(g'w_p + a * max(g'delta_n, 0)))
    Q = Z * S   (capped at OSCB_CAP seconds when sampled)
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .errors import FitError, InputError, ModelSanityError, SpecError
from .features import OSCB_CAP

log = logging.getLogger(__name__)

D = 7  # environment state dimension
MAX_LOG_RATE = 20.0
DAY_OF_WEEK_MEAN = 2 / 7


@dataclass
class ParticipantEnvModel:
    w_b: np.ndarray
    w_p: np.ndarray
    delta_b: np.ndarray
    delta_n: np.ndarray
    p_app: float = 0.5
    participant_id: Optional[int] = None
    fit_log_posterior: Optional[float] = None

    def __post_init__(self):
        for name in ("w_b", "w_p", "delta_b", "delta_n"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (D,):
                raise InputError(f"{name} must have {D} entries")
            if not np.all(np.isfinite(v)):
                raise InputError(f"{name} has non-finite weights")
            setattr(self, name, v)
        if not 0.0 <= self.p_app <= 1.0:
            raise InputError(f"p_app must be in [0, 1], got {self.p_app}")
        self.p_app = float(self.p_app)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.w_b, self.w_p, self.delta_b, self.delta_n])

    @classmethod
    def from_theta(cls, theta, **kw) -> "ParticipantEnvModel":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:D], theta[D:2 * D], theta[2 * D:3 * D], theta[3 * D:], **kw)

    def to_json(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "w_b": list(map(float, self.w_b)),
            "w_p": list(map(float, self.w_p)),
            "delta_b": list(map(float, self.delta_b)),
            "delta_n": list(map(float, self.delta_n)),
            "p_app": self.p_app,
            "fit_log_posterior": self.fit_log_posterior,
        }

    @classmethod
    def from_json(cls, row: dict) -> "ParticipantEnvModel":
        try:
            return cls(row["w_b"], row["w_p"], row["delta_b"], row["delta_n"],
                       p_app=float(row["p_app"]), participant_id=row.get("participant_id"),
                       fit_log_posterior=row.get("fit_log_posterior"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad model record: {exc}") from None


# ------------------------------------------------------------- outcomes

def _linear_terms(model: ParticipantEnvModel, g, action):
    g = np.asarray(g, dtype=float)
    a = np.asarray(action, dtype=float)
    x_b = g @ model.w_b - a * np.maximum(g @ model.delta_b, 0.0)
    eta = g @ model.w_p + a * np.maximum(g @ model.delta_n, 0.0)
    return x_b, eta


def brush_prob(model, g, action):
    """P(Z = 1)."""
    x_b, _ = _linear_terms(model, g, action)
    return special.expit(-x_b)


def poisson_rate(model, g, action):
    _, eta = _linear_terms(model, g, action)
    return np.exp(eta)


def zip_mean(model: ParticipantEnvModel, g, action):
    """Uncapped analytic mean P(Z=1) * lambda."""
    x_b, eta = _linear_terms(model, g, action)
    out = special.expit(-x_b) * np.exp(eta)
    return float(out) if np.ndim(out) == 0 else out


def zero_prob(model, g, action):
    x_b, eta = _linear_terms(model, g, action)
    p1 = special.expit(-x_b)
    return 1.0 - p1 + p1 * np.exp(-np.exp(eta))


def poisson_ppf(u, lam):
    """Smallest k with P(Poisson(lam) <= k) >= u, vectorized.

    Starts from the normal approximation and walks with the regularized
    incomplete gamma CDF; a handful of steps suffices for any rate.
    """
    u = np.asarray(u, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), u.shape)
    z = special.ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    k = np.maximum(np.floor(lam + np.sqrt(lam) * z), 0.0)
    while True:
        down = (k > 0) & (special.pdtr(np.maximum(k - 1, 0), lam) >= u)
        if not down.any():
            break
        k = np.where(down, k - 1, k)
    while True:
        up = special.pdtr(k, lam) < u
        if not up.any():
            break
        k = np.where(up, k + 1, k)
    return k


def zip_sample(model: ParticipantEnvModel, g, action, rng: np.random.Generator, size=None):
    """Draw OSCB seconds. Uses two uniforms per draw (inverse CDF), so paired
    runs with the same stream share outcome noise whatever the action."""
    x_b, eta = _linear_terms(model, g, action)
    if np.any(eta > MAX_LOG_RATE):
        raise ModelSanityError(f"Poisson log-rate {np.max(eta):.2f} exceeds {MAX_LOG_RATE}")
    u = rng.random(2) if size is None else rng.random((2, int(size)))
    z = u[0] < special.expit(-x_b)
    s = poisson_ppf(u[1], np.exp(eta))
    q = np.minimum(np.where(z, s, 0.0), OSCB_CAP).astype(int)
    return int(q) if size is None else q


def app_open_sample(p_app: float, rng: np.random.Generator) -> int:
    if not 0.0 <= p_app <= 1.0:
        raise InputError(f"p_app must be in [0, 1], got {p_app}")
    return int(rng.random() < p_app)


# ------------------------------------------------------------- MAP fit

def as_fit_data(data):
    """Normalize ``[(g, a, Q), ...]`` or ``(G, A, Q)`` arrays to arrays."""
    if isinstance(data, tuple) and len(data) == 3 and np.ndim(data[0]) == 2:
        G, A, Q = data
    else:
        rows = list(data)
        if not rows:
            raise InputError("fit data is empty")
        G = [r[0] for r in rows]
        A = [r[1] for r in rows]
        Q = [r[2] for r in rows]
    G = np.asarray(G, dtype=float).reshape(-1, D)
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if not (len(G) == len(A) == len(Q)) or len(G) == 0:
        raise InputError("fit data must be nonempty with matching lengths")
    if np.any(Q < 0):
        raise InputError("outcomes must be nonnegative")
    return G, A, Q


def _neg_log_posterior(theta, G, A, Q, with_grad=True):
    w_b, w_p, d_b, d_n = theta[:D], theta[D:2 * D], theta[2 * D:3 * D], theta[3 * D:]
    lin_b = G @ d_b
    lin_n = G @ d_n
    on_b = lin_b > 0
    on_n = lin_n > 0
    x_b = G @ w_b - A * np.where(on_b, lin_b, 0.0)
    eta = np.minimum(G @ w_p + A * np.where(on_n, lin_n, 0.0), 700.0)
    lam = np.exp(eta)
    zero = Q == 0

    log_p0 = special.log_expit(x_b)  # log P(Z = 0)
    log_p1 = special.log_expit(-x_b)  # log P(Z = 1)
    ll_zero = np.logaddexp(log_p0, log_p1 - lam)
    ll_pos = log_p1 + Q * eta - lam - special.gammaln(Q + 1)
    ll = np.where(zero, ll_zero, ll_pos)
    logpost = ll.sum() - 0.5 * theta @ theta - 0.5 * theta.size * np.log(2 * np.pi)
    if not with_grad:
        return -logpost

    wa = np.exp(log_p0 - ll_zero)
    wb = np.exp(log_p1 - lam - ll_zero)
    dx = np.where(zero, wa * special.expit(-x_b) - wb * special.expit(x_b), -special.expit(x_b))
    de = np.where(zero, -wb * lam, Q - lam)
    grad = np.concatenate([
        G.T @ dx,
        G.T @ de,
        G.T @ (dx * -A * on_b),
        G.T @ (de * A * on_n),
    ]) - theta
    return -logpost, -grad


def zip_log_posterior(model, data) -> float:
    """Log likelihood of (g, a, Q) data plus the N(0, I) log prior on all 28 weights."""
    theta = model.theta if isinstance(model, ParticipantEnvModel) else np.asarray(model, dtype=float)
    G, A, Q = as_fit_data(data)
    return -float(_neg_log_posterior(theta, G, A, Q, with_grad=False))


@dataclass
class FitResult:
    model: ParticipantEnvModel
    log_posterior: float
    restarts: list = field(default_factory=list)


def map_fit(data, restarts: int, rng: np.random.Generator, p_app: float = 0.5,
            participant_id: Optional[int] = None, maxiter: int = 5000) -> FitResult:
    """MAP weights from the zero vector plus ``restarts`` standard-normal starts."""
    if restarts < 1:
        raise InputError("restarts must be at least 1")
    G, A, Q = as_fit_data(data)
    n = 4 * D
    starts = [np.zeros(n)] + [rng.standard_normal(n) for _ in range(restarts)]
    best_theta, best_val, diag = None, -np.inf, []
    for k, x0 in enumerate(starts):
        start_val = -_neg_log_posterior(x0, G, A, Q, with_grad=False)
        res = optimize.minimize(_neg_log_posterior, x0, args=(G, A, Q), jac=True,
                                method="L-BFGS-B",
                                options={"maxiter": maxiter, "gtol": 1e-9, "ftol": 1e-15})
        end_val = -float(res.fun)
        ok = np.isfinite(end_val) and (res.success or np.max(np.abs(res.jac)) < 1e-3 * max(1, len(Q)))
        diag.append({"start": k, "start_log_posterior": float(start_val),
                     "log_posterior": end_val, "converged": bool(ok), "message": str(res.message)})
        candidates = [(end_val, res.x)] if ok else []
        if np.isfinite(start_val):
            candidates.append((float(start_val), x0))
        for val, theta in candidates:
            if val > best_val:
                best_val, best_theta = val, np.array(theta)
    if not any(d["converged"] for d in diag) or best_theta is None:
        raise FitError("MAP fit failed to converge from every start", diag)
    model = ParticipantEnvModel.from_theta(best_theta, p_app=p_app, participant_id=participant_id,
                                           fit_log_posterior=best_val)
    return FitResult(model, best_val, diag)


# ------------------------------------------------------- null environment

def default_state_grid() -> np.ndarray:
    """600 environment states spanning the feature ranges and quartile anchors."""
    rows = itertools.product(
        (0.0, 1.0),
        (-1.0, -0.7, 0.0, 0.1, 1.0),
        (-1.0, -0.6, -0.1, 0.0, 1.0),
        (0.0, 1.0),
        (0.0, 1.0),
        (-1.0, 0.0, 1.0),
    )
    return np.array([r + (1.0,) for r in rows])


def build_tilde_state(g) -> np.ndarray:
    """Replace day-of-week and days-in-trial by their trial means."""
    out = np.array(g, dtype=float)
    out[4] = DAY_OF_WEEK_MEAN
    out[5] = 0.0
    return out


@dataclass
class NullProjectionSpec:
    target_state: np.ndarray
    grid: np.ndarray = field(default_factory=default_state_grid)

    def __post_init__(self):
        self.target_state = np.asarray(self.target_state, dtype=float)
        self.grid = np.asarray(self.grid, dtype=float).reshape(-1, D)
        if self.target_state.shape != (D,):
            raise InputError(f"target state must have {D} entries")
        if len(self.grid) < 1:
            raise InputError("grid must contain at least one state")

    @property
    def tilde_state(self) -> np.ndarray:
        return build_tilde_state(self.target_state)


def projection_objective(x, delta, grid) -> float:
    r = np.asarray(grid) @ (np.asarray(x) - np.asarray(delta))
    return float(r @ r / len(r))


def project_null(delta, spec: NullProjectionSpec) -> np.ndarray:
    """Closest weights (in grid-averaged squared treatment effect) with zero
    effect at the tilde state."""
    delta = np.asarray(delta, dtype=float)
    gt = spec.tilde_state
    if not np.any(gt):
        raise SpecError("constraint state is the zero vector")
    M = spec.grid.T @ spec.grid
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        warnings.warn("grid Gram matrix is singular; adding a 1e-8 ridge", RuntimeWarning, stacklevel=2)
        M = M + 1e-8 * np.eye(D)
    Minv_g = np.linalg.solve(M, gt)
    out = delta - Minv_g * (gt @ delta) / (gt @ Minv_g)
    # one correction step removes residual rounding in the constraint
    out = out - Minv_g * (gt @ out) / (gt @ Minv_g)
    # land on the nonpositive side so max(g~'delta, 0) is exactly zero
    tiny = np.finfo(float).eps * (np.abs(gt) @ np.abs(out) + 1.0)
    for _ in range(8):
        r = gt @ out
        if r <= 0:
            break
        out = out - Minv_g * (r + tiny) / (gt @ Minv_g)
        tiny *= 2
    return out


def make_null_environment(models: Sequence[ParticipantEnvModel], target_state,
                          grid=None) -> list[ParticipantEnvModel]:
    spec = NullProjectionSpec(target_state, default_state_grid() if grid is None else grid)
    return [
        replace(m, delta_b=project_null(m.delta_b, spec), delta_n=project_null(m.delta_n, spec))
        for m in models
    ]


# --------------------------------------------------------- synthetic models

def _screen(model: ParticipantEnvModel, grid: np.ndarray) -> Optional[str]:
    rates = np.concatenate([poisson_rate(model, grid, 0), poisson_rate(model, grid, 1)])
    if rates.max() > 150.0:
        return "Poisson rate above 150 s"
    mean0 = zip_mean(model, grid, 0).mean()
    if not 20.0 <= mean0 <= 140.0:
        return f"baseline mean {mean0:.1f} s outside [20, 140]"
    pz = zero_prob(model, grid, 0).mean()
    if not 0.2 < pz < 0.8:
        return f"zero proportion {pz:.2f} outside (0.2, 0.8)"
    return None


def sample_model(rng: np.random.Generator, participant_id=None) -> ParticipantEnvModel:
    z = rng.standard_normal((4, D))
    w_b = 0.3 * z[0]
    w_b[6] = 0.8 * z[0, 6]
    w_p = 0.03 * z[1]
    w_p[6] = np.log(110.0) + 0.1 * z[1, 6]
    delta_b = 0.05 * z[2]
    delta_b[6] = 0.2 + 0.1 * abs(z[2, 6])
    delta_n = 0.01 * z[3]
    delta_n[6] = 0.03 + 0.02 * abs(z[3, 6])
    return ParticipantEnvModel(w_b, w_p, delta_b, delta_n,
                               p_app=float(rng.uniform(0.2, 0.9)), participant_id=participant_id)


def gen_synthetic_models(config, rng: np.random.Generator, max_tries: int = 1000) -> list[ParticipantEnvModel]:
    """Plausible participant models standing in for trial-fitted ones."""
    grid = default_state_grid()
    models = []
    for pid in range(1, config.num_participants + 1):
        for _ in range(max_tries):
            m = sample_model(rng, participant_id=pid)
            reason = _screen(m, grid)
            if reason is None:
                models.append(m)
                break
            log.debug("rejected model for participant %d: %s", pid, reason)
        else:
            raise ModelSanityError(f"no acceptable model for participant {pid} in {max_tries} draws")
    return models
