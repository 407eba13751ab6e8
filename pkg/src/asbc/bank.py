"""Leader-window bank: real windows, augmentations, plausibility filters,
summary features and representativeness scores."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import Segment, finite_diff_accel
from .errors import ConfigError, FormatError

FEATURE_VERSION = 1
FEATURE_NAMES = ("mean_v", "std_v", "min_v", "max_v", "mean_a", "std_a", "max_abs_a", "mean_abs_dv")
AUGMENTATIONS = ("perturb", "rescale", "timewarp")
SMOOTHING_TAPS = 9
WARP_PIECES = 3


@dataclass(frozen=True)
class BankConfig:
    W: int = 75
    stride: int = 50
    syn_cap: int = 10000
    time_scale_range: tuple[float, float] = (0.9, 1.1)
    scale_range: tuple[float, float] = (0.9, 1.1)
    vel_jitter: float = 0.20
    acc_clip: float = 2.5
    jerk_clip: float = 5.0
    a_phys_max: float = 10.0
    j_max: float = 20.0
    eps_kin: float = 0.5
    envelope_percentiles: tuple[float, float] = (1.0, 99.0)
    dt: float = 0.2


@dataclass(frozen=True)
class LeaderWindow:
    v: np.ndarray
    a: np.ndarray
    source: str = "real"
    origin_id: int = -1
    # observed follower state (s, v, dv) at the window start, used to seed simulations
    init: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class Envelope:
    v_lo: float
    v_hi: float
    a_lo: float
    a_hi: float


class Rejected(NamedTuple):
    reasons: tuple[str, ...]


def make_window(v: np.ndarray, dt: float, source: str = "real", origin_id: int = -1,
                init: np.ndarray | None = None) -> LeaderWindow:
    v = np.asarray(v, dtype=float)
    return LeaderWindow(v, finite_diff_accel(v, dt), source, origin_id, init)


def build_real_bank(segments: Sequence[Segment], cfg: BankConfig) -> list[LeaderWindow]:
    out = []
    for seg in segments:
        v = seg.leader[:, 0]
        for o in range(0, len(v) - cfg.W + 1, cfg.stride):
            out.append(make_window(v[o:o + cfg.W], seg.dt, "real", seg.leader_id,
                                   seg.states[o].copy()))
    return out


def compute_envelope(windows: Sequence[LeaderWindow], cfg: BankConfig) -> Envelope:
    v = np.concatenate([w.v for w in windows])
    a = np.concatenate([w.a for w in windows])
    lo, hi = cfg.envelope_percentiles
    return Envelope(*np.percentile(v, [lo, hi]).tolist(), *np.percentile(a, [lo, hi]).tolist())


def passes_filters(window: LeaderWindow, cfg: BankConfig, envelope: Envelope | None) -> tuple[bool, list[str]]:
    """The five plausibility checks; returns (ok, names of violated checks)."""
    v, a, dt = window.v, window.a, cfg.dt
    bad = []
    if np.any(v < 0):
        bad.append("non-negativity")
    if np.any(np.abs(a) > cfg.a_phys_max):
        bad.append("acceleration")
    if len(a) > 1 and np.any(np.abs(np.diff(a) / dt) > cfg.j_max):
        bad.append("jerk")
    if len(v) > 1 and np.any(np.abs(np.diff(v) - a[1:] * dt) > cfg.eps_kin):
        bad.append("kinematic")
    if envelope is not None:
        if (np.any(v < envelope.v_lo) or np.any(v > envelope.v_hi)
                or np.any(a < envelope.a_lo) or np.any(a > envelope.a_hi)):
            bad.append("envelope")
    return not bad, bad


def _smoothed_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n + SMOOTHING_TAPS - 1)
    smooth = np.convolve(noise, np.ones(SMOOTHING_TAPS) / SMOOTHING_TAPS, mode="valid")
    peak = np.max(np.abs(smooth))
    return smooth / peak if peak > 0 else smooth


def _warp_grid(n: int, factors: Sequence[float]) -> np.ndarray:
    """Source positions tau(t) for a monotone piecewise-affine warp of {0..n-1}."""
    src = np.linspace(0.0, n - 1, len(factors) + 1)
    dur = np.diff(src) * np.asarray(factors, dtype=float)
    out = np.concatenate([[0.0], np.cumsum(dur)])
    out *= (n - 1) / out[-1]
    return np.interp(np.arange(n, dtype=float), out, src)


def augment(window: LeaderWindow, kind: str, cfg: BankConfig, rng: np.random.Generator,
            envelope: Envelope | None = None, *, kappa: float | None = None,
            amplitude: float | None = None, factors: Sequence[float] | None = None):
    """One physics-respecting augmentation; returns a window or :class:`Rejected`."""
    if window.source != "real":
        raise ValueError("augmentations apply to real windows only")
    v = window.v
    if kind == "perturb":
        amp = cfg.vel_jitter if amplitude is None else amplitude
        v_new = v + amp * _smoothed_noise(len(v), rng)
    elif kind == "rescale":
        k = rng.uniform(*cfg.scale_range) if kappa is None else kappa
        v_new = k * v
    elif kind == "timewarp":
        f = rng.uniform(*cfg.time_scale_range, size=WARP_PIECES) if factors is None else factors
        v_new = np.interp(_warp_grid(len(v), f), np.arange(len(v), dtype=float), v)
    else:
        raise ValueError(f"unknown augmentation {kind!r}")
    init = None
    if window.init is not None:
        init = window.init.copy()
        init[2] = init[1] - v_new[0]
    out = make_window(v_new, cfg.dt, "synthetic", window.origin_id, init)
    reasons = []
    # caps on how much the augmentation may change the acceleration and jerk profiles
    da = out.a - window.a
    if np.any(np.abs(da) > cfg.acc_clip):
        reasons.append("acc-clip")
    if len(da) > 1 and np.any(np.abs(np.diff(da) / cfg.dt) > cfg.jerk_clip):
        reasons.append("jerk-clip")
    ok, bad = passes_filters(out, cfg, envelope)
    reasons.extend(bad)
    return Rejected(tuple(reasons)) if reasons else out


def build_synthetic_pool(real: Sequence[LeaderWindow], cfg: BankConfig, envelope: Envelope,
                         rng: np.random.Generator, max_attempts: int | None = None) -> list[LeaderWindow]:
    """Augment random real windows until ``syn_cap`` windows pass or attempts run out."""
    if not real:
        return []
    max_attempts = 4 * cfg.syn_cap if max_attempts is None else max_attempts
    pool = []
    for _ in range(max_attempts):
        if len(pool) >= cfg.syn_cap:
            break
        src = real[rng.integers(len(real))]
        out = augment(src, AUGMENTATIONS[rng.integers(3)], cfg, rng, envelope)
        if not isinstance(out, Rejected):
            pool.append(out)
    return pool


def features(window: LeaderWindow) -> np.ndarray:
    v, a = window.v, window.a
    dv = np.abs(np.diff(v)).mean() if len(v) > 1 else 0.0
    return np.array([v.mean(), v.std(), v.min(), v.max(), a.mean(), a.std(), np.abs(a).max(), dv])


def feature_matrix(windows: Sequence[LeaderWindow]) -> np.ndarray:
    if not windows:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.stack([features(w) for w in windows])


def representativeness(query: np.ndarray, bank: np.ndarray, K: int = 5, eps: float = 1e-3,
                       self_index: Sequence[int] | np.ndarray | None = None,
                       chunk: int = 2048) -> np.ndarray:
    """rho = 1 / (eps + mean distance to the K nearest bank features).

    ``query`` is (n, d) or (d,); ``self_index[i]`` (or -1) names the bank row
    that *is* query ``i`` and is excluded from its neighbours.
    """
    q = np.atleast_2d(np.asarray(query, dtype=float))
    bank = np.atleast_2d(np.asarray(bank, dtype=float))
    if len(bank) - (0 if self_index is None else 1) < K:
        raise ConfigError(f"bank of {len(bank)} windows is smaller than K={K}")
    idx = None if self_index is None else np.broadcast_to(np.asarray(self_index), (len(q),))
    out = np.empty(len(q))
    for start in range(0, len(q), chunk):
        sl = slice(start, start + chunk)
        d = np.sqrt(np.maximum(((q[sl, None, :] - bank[None, :, :]) ** 2).sum(-1), 0.0))
        if idx is not None:
            rows = np.arange(d.shape[0])
            own = idx[sl]
            mask = own >= 0
            d[rows[mask], own[mask]] = np.inf
        nearest = np.partition(d, K - 1, axis=1)[:, :K]
        out[sl] = 1.0 / (eps + nearest.mean(axis=1))
    return out


def sample_round_bank(real: Sequence[LeaderWindow], syn: Sequence[LeaderWindow], alpha_r: float,
                      n: int, rng: np.random.Generator) -> list[LeaderWindow]:
    """Each draw is synthetic with probability ``alpha_r``, else real; uniform within pools."""
    idx, from_syn = sample_round_indices(len(real), len(syn), alpha_r, n, rng)
    return [syn[i] if s else real[i] for i, s in zip(idx, from_syn)]


def sample_round_indices(n_real: int, n_syn: int, alpha_r: float, n: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n_real == 0:
        raise ValueError("real bank is empty")
    if alpha_r > 0 and n_syn == 0:
        raise ValueError("synthetic pool is empty but alpha_r > 0")
    from_syn = rng.random(n) < alpha_r
    idx = np.where(from_syn, rng.integers(0, max(n_syn, 1), n), rng.integers(0, n_real, n))
    return idx, from_syn


def schedule_value(schedule: Sequence[float], r: int, kind: str) -> float:
    """Round ``r`` entry of a mixing schedule.

    Beyond the listed entries the soft-shrink (lambda) schedule holds at its
    last value clipped to 0, and the leader-mix (alpha) schedule keeps its
    last step size, capped at 0.5.
    """
    if r < len(schedule):
        return float(schedule[r])
    if kind == "lambda":
        return max(float(schedule[-1]), 0.0)
    step = schedule[-1] - schedule[-2] if len(schedule) > 1 else 0.0
    return float(min(schedule[-1] + step * (r - len(schedule) + 1), 0.5))


@dataclass
class LeaderBank:
    cfg: BankConfig
    envelope: Envelope
    real: list[LeaderWindow]
    syn: list[LeaderWindow] = field(default_factory=list)
    K_rho: int = 5
    eps_rho: float = 1e-3

    def __post_init__(self):
        self.real_features = feature_matrix(self.real)
        self.syn_features = feature_matrix(self.syn)
        k = min(self.K_rho, max(len(self.real) - 1, 1))
        self.rho_real = (representativeness(self.real_features, self.real_features, k, self.eps_rho,
                                            self_index=np.arange(len(self.real)))
                         if len(self.real) > k else np.ones(len(self.real)))
        self.rho_syn = (representativeness(self.syn_features, self.real_features, k, self.eps_rho)
                        if len(self.syn) and len(self.real) >= k else np.ones(len(self.syn)))

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], cfg: BankConfig, rng: np.random.Generator,
                      K_rho: int = 5, eps_rho: float = 1e-3) -> "LeaderBank":
        real = build_real_bank(segments, cfg)
        if not real:
            raise ConfigError(f"no segment is long enough for a {cfg.W}-step leader window")
        env = compute_envelope(real, cfg)
        syn = build_synthetic_pool(real, cfg, env, rng)
        return cls(cfg, env, real, syn, K_rho, eps_rho)

    def draw(self, alpha_r: float, n: int, rng: np.random.Generator):
        """Indices into the real/synthetic pools plus features and rho of each draw."""
        idx, from_syn = sample_round_indices(len(self.real), len(self.syn), alpha_r, n, rng)
        feats = np.empty((n, len(FEATURE_NAMES)))
        rho = np.empty(n)
        real = ~from_syn
        feats[real], rho[real] = self.real_features[idx[real]], self.rho_real[idx[real]]
        feats[from_syn], rho[from_syn] = self.syn_features[idx[from_syn]], self.rho_syn[idx[from_syn]]
        return idx, from_syn, feats, rho

    def window(self, idx: int, from_syn: bool) -> LeaderWindow:
        return self.syn[idx] if from_syn else self.real[idx]

    def save(self, path: str | Path) -> None:
        header = {
            "cfg": asdict(self.cfg), "envelope": asdict(self.envelope),
            "feature_version": FEATURE_VERSION, "feature_names": FEATURE_NAMES,
            "K_rho": self.K_rho, "eps_rho": self.eps_rho,
        }
        pools = {}
        for name, ws in (("real", self.real), ("syn", self.syn)):
            pools[f"{name}_v"] = np.array([w.v for w in ws]).reshape(len(ws), self.cfg.W)
            pools[f"{name}_origin"] = np.array([w.origin_id for w in ws], dtype=np.int64)
            pools[f"{name}_init"] = np.array([w.init if w.init is not None else np.full(3, np.nan)
                                              for w in ws]).reshape(len(ws), 3)
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **pools)

    @classmethod
    def load(cls, path: str | Path) -> "LeaderBank":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("feature_version") != FEATURE_VERSION:
                raise FormatError(f"{path}: feature version {header.get('feature_version')} "
                                  f"!= {FEATURE_VERSION}")
            c = header["cfg"]
            cfg = BankConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
            pools = {}
            for name, source in (("real", "real"), ("syn", "synthetic")):
                ws = []
                for v, o, ini in zip(z[f"{name}_v"], z[f"{name}_origin"], z[f"{name}_init"]):
                    ws.append(make_window(v, cfg.dt, source, int(o),
                                          None if np.isnan(ini).all() else ini))
                pools[name] = ws
        return cls(cfg, Envelope(**header["envelope"]), pools["real"], pools["syn"],
                   header["K_rho"], header["eps_rho"])
