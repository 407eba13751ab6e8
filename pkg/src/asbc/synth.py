"""Closed-loop synthetic car-following data with known parameters.

Leaders follow a smooth random speed profile; each follower is simulated
from the residual-augmented IDM with its own parameter draw.  Results can be
written in the trajectory CSV schema read by :mod:`asbc.data`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import seeding
from .data import Segment, finite_diff_accel
from .sim import ResidualSpec, integrate, sample_prior_array, sample_residuals

LEADER_LENGTH = 4.5
FOLLOWER_LENGTH = 4.5


def leader_profile(n: int, dt: float, rng: np.random.Generator, v_range: tuple[float, float] = (12.0, 30.0),
                   a_sd: float = 0.5, corr_time: float = 4.0, n_events: float = 0.02) -> np.ndarray:
    """Leader speed: a mean-reverting random acceleration with occasional
    brake/recover episodes; never negative."""
    v = np.empty(n)
    v[0] = rng.uniform(*v_range)
    target = v[0]
    phi = np.exp(-dt / corr_time)
    a = 0.0
    event = 0
    for t in range(1, n):
        if event == 0 and rng.random() < n_events * dt:
            event = int(rng.integers(10, 30))
            depth = rng.uniform(0.8, 2.5)
        drive = -depth if event > 0 else 0.1 * (target - v[t - 1])
        event = max(event - 1, 0)
        a = phi * a + (1 - phi) * drive + a_sd * np.sqrt(1 - phi ** 2) * rng.standard_normal()
        a = float(np.clip(a, -4.0, 2.5))
        v[t] = max(v[t - 1] + a * dt, 0.0)
    return v


@dataclass(frozen=True)
class SyntheticPair:
    segment: Segment
    theta: np.ndarray
    flagged: bool


def synthetic_pairs(n_pairs: int, duration: float, dt: float, spec: ResidualSpec, seed: int,
                    theta: np.ndarray | None = None, max_tries: int = 20) -> list[SyntheticPair]:
    """``n_pairs`` leader/follower pairs of ``duration`` seconds.

    Follower ``k`` gets parameters ``theta[k]`` (prior draws when omitted) and
    starts at its leader's speed with a time headway of about its own T.
    Rollouts hitting the gap clamp are redrawn with a fresh leader profile.
    """
    n = int(round(duration / dt))
    rng = seeding.stream(seed, "synth")
    if theta is None:
        theta = sample_prior_array(spec, n_pairs, rng)
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if len(theta) != n_pairs:
        raise ValueError("theta must have one row per pair")
    out = []
    for k in range(n_pairs):
        for attempt in range(max_tries):
            vl = leader_profile(n, dt, rng)
            th = theta[k]
            init = np.array([th[1] + vl[0] * th[2], vl[0], 0.0])
            r = sample_residuals(spec, th[None], n, dt, [seeding.stream(seed, "synth-res", k * max_tries + attempt)])
            states, _, flags = integrate(th[None], init[None], vl[None], dt, r)
            if not flags[0] or attempt == max_tries - 1:
                break
        leader = np.column_stack([vl, finite_diff_accel(vl, dt)])
        seg = Segment(2 * k + 2, 2 * k + 1, dt, states[0], leader, 0.0)
        out.append(SyntheticPair(seg, th.copy(), bool(flags[0])))
    return out


def to_track_frame(pairs: list[SyntheticPair], frame_rate: float = 25.0, factor: int = 5) -> pd.DataFrame:
    """Trajectory table at ``frame_rate``; every ``factor``-th frame holds the
    exact simulated state, frames in between are linearly interpolated."""
    rows = []
    for p in pairs:
        seg = p.segment
        n = len(seg)
        vl, s, v = seg.leader[:, 0], seg.states[:, 0], seg.states[:, 1]
        xl = np.concatenate([[LEADER_LENGTH + s[0] + 100.0], np.zeros(n - 1)])
        xl[1:] = xl[0] + np.cumsum(vl[:-1] * seg.dt)
        xf = xl - LEADER_LENGTH - s
        fine = np.arange((n - 1) * factor + 1) / factor
        coarse = np.arange(n)
        frames = np.arange(len(fine))
        for tid, pid, x, sp, length in ((seg.leader_id, 0, xl, vl, LEADER_LENGTH),
                                        (seg.follower_id, seg.leader_id, xf, v, FOLLOWER_LENGTH)):
            rows.append(pd.DataFrame({
                "frame": frames, "id": tid, "precedingId": pid,
                "x": np.interp(fine, coarse, x), "xVelocity": np.interp(fine, coarse, sp),
                "length": length,
            }))
    return pd.concat(rows, ignore_index=True)


def write_tracks_csv(pairs: list[SyntheticPair], path: str | Path, frame_rate: float = 25.0,
                     factor: int = 5) -> None:
    to_track_frame(pairs, frame_rate, factor).to_csv(path, index=False, float_format="%.10g")


def write_truth_csv(pairs: list[SyntheticPair], spec: ResidualSpec, path: str | Path) -> None:
    df = pd.DataFrame([p.theta for p in pairs], columns=list(spec.param_names))
    df.insert(0, "follower_id", [p.segment.follower_id for p in pairs])
    df["flagged"] = [p.flagged for p in pairs]
    df.to_csv(path, index=False, float_format="%.17g")
