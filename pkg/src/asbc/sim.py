"""Residual-augmented IDM: deterministic core, residual processes, rollout, priors."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import linalg

from .data import FollowerState
from .errors import DomainError, NumericalError, PriorRejectionError

DELTA = 4.0
THETA_REC = np.array([33.3, 2.0, 1.6, 1.5, 1.67])
IDM_NAMES = ("v0", "s0", "T", "a_max", "b")
# feasible box used to truncate the IDM prior
PRIOR_LOW = np.array([20.0, 1.0, 0.6, 0.2, 0.4])
PRIOR_HIGH = np.array([40.0, 6.0, 4.5, 3.5, 4.0])
IDM_LOG_SCALE = 1.0

MIN_GAP = 0.1


class ResidualKind(str, Enum):
    IID_GAUSSIAN = "iid_gaussian"
    MATERN52 = "matern52"


@dataclass(frozen=True)
class ResidualSpec:
    kind: ResidualKind = ResidualKind.IID_GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "kind", ResidualKind(self.kind))

    @property
    def dim(self) -> int:
        return 7 if self.kind is ResidualKind.MATERN52 else 6

    @property
    def param_names(self) -> tuple[str, ...]:
        extra = ("sigma", "ell") if self.kind is ResidualKind.MATERN52 else ("sigma",)
        return IDM_NAMES + extra

    # log-normal (location, scale) for the residual hyperparameters
    @property
    def residual_prior(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind is ResidualKind.MATERN52:
            return np.array([np.log(0.3), np.log(3.0)]), np.array([0.5, 0.5])
        return np.array([-1.0]), np.array([0.3])


GAUSSIAN = ResidualSpec(ResidualKind.IID_GAUSSIAN)
MATERN = ResidualSpec(ResidualKind.MATERN52)


@dataclass(frozen=True)
class IdmParams:
    v0: float = 33.3
    s0: float = 2.0
    T: float = 1.6
    a_max: float = 1.5
    b: float = 1.67
    delta: float = DELTA

    def __post_init__(self):
        for name in ("v0", "s0", "T", "a_max", "b", "delta"):
            if not getattr(self, name) > 0:
                raise DomainError(f"IDM parameter {name} must be positive")


@dataclass(frozen=True)
class ParamVector:
    idm: IdmParams
    sigma: float
    ell: float | None = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError("sigma must be non-negative")
        if self.ell is not None and not self.ell > 0:
            raise DomainError("ell must be positive")

    def to_array(self) -> np.ndarray:
        p = self.idm
        vals = [p.v0, p.s0, p.T, p.a_max, p.b, self.sigma]
        if self.ell is not None:
            vals.append(self.ell)
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "ParamVector":
        arr = [float(a) for a in arr]
        if len(arr) not in (6, 7):
            raise DomainError(f"expected 6 or 7 parameters, got {len(arr)}")
        return cls(IdmParams(*arr[:5]), arr[5], arr[6] if len(arr) == 7 else None)


@dataclass
class Rollout:
    states: np.ndarray  # (n, 3): s, v, dv
    accel: np.ndarray
    residual: np.ndarray
    flagged: bool = False


def idm_accel(p: IdmParams, s, v, dv):
    """IDM acceleration; works elementwise on arrays."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise DomainError("gap must be positive")
    s_star = p.s0 + v * p.T + v * dv / (2.0 * np.sqrt(p.a_max * p.b))
    return p.a_max * (1.0 - (np.asarray(v) / p.v0) ** p.delta - (s_star / s) ** 2)


def _idm_accel_batch(theta: np.ndarray, s, v, dv):
    v0, s0, T, a_max, b = theta[:, 0], theta[:, 1], theta[:, 2], theta[:, 3], theta[:, 4]
    s_star = s0 + v * T + v * dv / (2.0 * np.sqrt(a_max * b))
    return a_max * (1.0 - (v / v0) ** DELTA - (s_star / s) ** 2)


def matern52_kernel(t1, t2, sigma: float, ell: float):
    d = np.abs(np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float))
    r = np.sqrt(5.0) * d / ell
    return sigma ** 2 * (1.0 + r + r ** 2 / 3.0) * np.exp(-r)


_cache_lock = threading.Lock()


@lru_cache(maxsize=256)
def _unit_matern_chol(n: int, dt: float, ell_key: float) -> np.ndarray:
    t = np.arange(n) * dt
    K = matern52_kernel(t[:, None], t[None, :], 1.0, ell_key)
    jitter = 1e-10
    while jitter <= 1e-4 * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"Matern Gram matrix not positive definite (n={n}, dt={dt}, ell={ell_key})")


def matern_cholesky(n: int, dt: float, ell: float) -> np.ndarray:
    """Lower Cholesky factor of the unit-variance Matern-5/2 Gram matrix.

    Length scales are quantised to 1e-3 s so factors can be cached.
    """
    key = round(max(float(ell), 1e-3), 3)
    with _cache_lock:
        return _unit_matern_chol(int(n), round(float(dt), 9), key)


def sample_residual(spec: ResidualSpec, p: ParamVector, n: int, dt: float,
                    rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal(n)
    if spec.kind is ResidualKind.IID_GAUSSIAN or n == 1:
        return p.sigma * z
    if p.ell is None:
        raise DomainError("Matern residual requires a length scale")
    return p.sigma * (matern_cholesky(n, dt, p.ell) @ z)


def sample_residuals(spec: ResidualSpec, theta: np.ndarray, n: int, dt: float,
                     rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Row ``i`` uses ``rngs[i]``: identical draws to per-pair :func:`sample_residual`."""
    theta = np.atleast_2d(theta)
    z = np.stack([g.standard_normal(n) for g in rngs])
    if spec.kind is ResidualKind.IID_GAUSSIAN or n == 1:
        return theta[:, 5:6] * z
    out = np.empty_like(z)
    for i in range(len(theta)):
        out[i] = theta[i, 5] * (matern_cholesky(n, dt, theta[i, 6]) @ z[i])
    return out


def integrate(theta: np.ndarray, init: np.ndarray, v_lead: np.ndarray, dt: float,
              residual: np.ndarray):
    """Vectorised kinematic rollout of ``len(theta)`` followers.

    Returns ``states (B, n, 3)``, ``accel (B, n)`` and ``flags (B,)``.  A
    rollout is flagged when the gap would fall to ``MIN_GAP`` or below (gap
    clamped) or the speed would turn negative (stored acceleration reduced
    so the speed stops at zero).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    init = np.atleast_2d(np.asarray(init, dtype=float))
    v_lead = np.atleast_2d(np.asarray(v_lead, dtype=float))
    residual = np.atleast_2d(residual)
    B, n = residual.shape
    if v_lead.shape[0] == 1 and B > 1:
        v_lead = np.broadcast_to(v_lead, (B, v_lead.shape[1]))
    if init.shape[0] == 1 and B > 1:
        init = np.broadcast_to(init, (B, 3))
    states = np.empty((B, n, 3))
    accel = np.empty((B, n))
    flags = np.zeros(B, dtype=bool)
    s, v, dv = init[:, 0].copy(), init[:, 1].copy(), init[:, 2].copy()
    for t in range(n):
        states[:, t, 0], states[:, t, 1], states[:, t, 2] = s, v, dv
        a = _idm_accel_batch(theta, s, v, dv) + residual[:, t]
        v_next = v + a * dt
        neg = v_next < 0
        if neg.any():
            a = np.where(neg, -v / dt, a)
            v_next = np.where(neg, 0.0, v_next)
            flags |= neg
        accel[:, t] = a
        if t == n - 1:
            break
        s_next = s + (v_lead[:, t] - v) * dt - 0.5 * a * dt * dt
        hit = s_next <= MIN_GAP
        if hit.any():
            s_next = np.where(hit, MIN_GAP, s_next)
            flags |= hit
        s, v = s_next, v_next
        dv = v - v_lead[:, t + 1]
    return states, accel, flags


def rollout(p: ParamVector, spec: ResidualSpec, init: FollowerState, v_lead: np.ndarray,
            dt: float, rng: np.random.Generator) -> Rollout:
    v_lead = np.asarray(v_lead, dtype=float)
    if init.s <= 0:
        raise DomainError("initial gap must be positive")
    if v_lead.size == 0:
        raise ValueError("leader window is empty")
    r = sample_residual(spec, p, len(v_lead), dt, rng)
    states, accel, flags = integrate(p.to_array()[None], init.as_array()[None], v_lead[None], dt, r[None])
    return Rollout(states[0], accel[0], r, bool(flags[0]))


# -- priors ------------------------------------------------------------------

def _prior_locations(spec: ResidualSpec) -> tuple[np.ndarray, np.ndarray]:
    loc_r, scale_r = spec.residual_prior
    loc = np.concatenate([np.log(THETA_REC), loc_r])
    scale = np.concatenate([np.full(5, IDM_LOG_SCALE), scale_r])
    return loc, scale


def sample_prior_array(spec: ResidualSpec, n: int, rng: np.random.Generator,
                       max_retries: int = 1000) -> np.ndarray:
    """``n`` joint draws as an (n, D) array; IDM block rejection-sampled into the box."""
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    loc, scale = _prior_locations(spec)
    out = np.empty((n, spec.dim))
    filled = 0
    tries = 0
    while filled < n:
        need = n - filled
        batch = max(16, int(need * 20))
        draw = np.exp(loc + scale * rng.standard_normal((batch, spec.dim)))
        ok = np.all((draw[:, :5] >= PRIOR_LOW) & (draw[:, :5] <= PRIOR_HIGH), axis=1)
        take = draw[ok][:need]
        out[filled:filled + len(take)] = take
        filled += len(take)
        tries += batch
        if filled < n and tries >= max_retries * n:
            raise PriorRejectionError(f"prior truncation rejected {tries} draws")
    return out


def sample_prior(spec: ResidualSpec, rng: np.random.Generator, max_retries: int = 1000) -> ParamVector:
    """One draw, rejecting up to ``max_retries`` times."""
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    loc, scale = _prior_locations(spec)
    for _ in range(max_retries):
        draw = np.exp(loc + scale * rng.standard_normal(spec.dim))
        if np.all((draw[:5] >= PRIOR_LOW) & (draw[:5] <= PRIOR_HIGH)):
            return ParamVector.from_array(draw)
    raise PriorRejectionError(f"no feasible prior draw in {max_retries} attempts")


def in_prior_box(theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    return np.all((theta[:, :5] >= PRIOR_LOW) & (theta[:, :5] <= PRIOR_HIGH), axis=1)


def log_prior(p: ParamVector | np.ndarray, spec: ResidualSpec, space: str = "log") -> float:
    """Unnormalised log prior.

    ``space="log"`` gives the Gaussian log density of ``log theta`` (mode at
    the prior medians); ``space="theta"`` adds the ``-sum(log theta)``
    Jacobian to give the density over theta itself.  Outside the truncation
    box the value is ``-inf``.
    """
    theta = p.to_array() if isinstance(p, ParamVector) else np.asarray(p, dtype=float)
    if theta.shape != (spec.dim,):
        raise DomainError(f"expected {spec.dim} parameters")
    if np.any(theta <= 0) or not in_prior_box(theta)[0]:
        return -np.inf
    loc, scale = _prior_locations(spec)
    z = (np.log(theta) - loc) / scale
    lp = float(np.sum(-0.5 * z ** 2 - np.log(scale) - 0.5 * np.log(2 * np.pi)))
    if space == "theta":
        lp -= float(np.sum(np.log(theta)))
    elif space != "log":
        raise ValueError("space must be 'log' or 'theta'")
    return lp


def grad_log_prior(p: ParamVector | np.ndarray, spec: ResidualSpec, space: str = "log") -> np.ndarray:
    """Gradient of :func:`log_prior` with respect to ``log theta`` (``space="log"``)
    or ``theta`` (``space="theta"``), inside the box."""
    theta = p.to_array() if isinstance(p, ParamVector) else np.asarray(p, dtype=float)
    loc, scale = _prior_locations(spec)
    g_log = -(np.log(theta) - loc) / scale ** 2
    if space == "log":
        return g_log
    return (g_log - 1.0) / theta
