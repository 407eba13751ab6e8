"""Trajectory ingest: raw tracks -> leader/follower segments -> windows and splits.

Input CSV schema (one row per frame, header required)::

    frame,id,precedingId,x,xVelocity,length[,xAcceleration]

``x`` is the longitudinal position of the vehicle's *front* bumper along the
direction of travel, ``length`` the vehicle length (m); ``precedingId`` is 0
when there is no leader.  The gap is bumper-to-bumper::

    s = (x_leader - length_leader) - x_follower

When the ``length`` column is absent, lengths are taken as zero and a
warning is logged.  Unknown columns are ignored.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyInput, FormatError, InsufficientData, InsufficientLength

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("frame", "id", "precedingId", "x", "xVelocity")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RawTrack:
    track_id: int
    time: np.ndarray
    x: np.ndarray
    speed: np.ndarray
    preceding_id: np.ndarray
    length: float = 0.0

    def __len__(self) -> int:
        return len(self.time)

    @property
    def dt(self) -> float:
        if len(self.time) < 2:
            return float("nan")
        return float(self.time[1] - self.time[0])


@dataclass(frozen=True)
class FollowerState:
    s: float
    v: float
    dv: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v, self.dv])


@dataclass(frozen=True)
class Segment:
    """One leader-follower pair sampled every ``dt`` seconds.

    ``states`` has columns (s, v, dv); ``leader`` has columns (v_lead, a_lead).
    """

    follower_id: int
    leader_id: int
    dt: float
    states: np.ndarray
    leader: np.ndarray
    t0: float = 0.0

    def __len__(self) -> int:
        return len(self.states)

    @property
    def duration(self) -> float:
        return len(self) * self.dt

    @property
    def follower_accel(self) -> np.ndarray:
        """Forward-difference follower acceleration (last value repeated)."""
        v = self.states[:, 1]
        a = np.empty_like(v)
        if len(v) < 2:
            a[:] = 0.0
            return a
        a[:-1] = np.diff(v) / self.dt
        a[-1] = a[-2]
        return a


@dataclass(frozen=True)
class ObsWindow:
    """A fixed-length slice of a segment, aligned with its leader profile."""

    offset: int
    states: np.ndarray
    v_lead: np.ndarray
    a_lead: np.ndarray

    @property
    def init(self) -> FollowerState:
        return FollowerState(*self.states[0])


@dataclass
class SplitAssignment:
    assignment: dict[int, str] = field(default_factory=dict)

    def ids(self, split: str) -> list[int]:
        return sorted(k for k, v in self.assignment.items() if v == split)

    def to_json(self) -> str:
        return json.dumps({str(k): self.assignment[k] for k in sorted(self.assignment)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        return cls({int(k): v for k, v in json.loads(text).items()})


def finite_diff_accel(v: np.ndarray, dt: float) -> np.ndarray:
    """a(t) = (v(t) - v(t-1)) / dt for t >= 2, with a(1) = a(2)."""
    v = np.asarray(v, dtype=float)
    a = np.zeros_like(v)
    if len(v) >= 2:
        a[1:] = np.diff(v) / dt
        a[0] = a[1]
    return a


def read_tracks(path: str | Path, frame_rate: float = 25.0) -> list[RawTrack]:
    """Parse a trajectory CSV into tracks; raises FormatError with row diagnostics."""
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable CSV ({exc})") from exc
    return tracks_from_frame(df, frame_rate, source=str(path))


def tracks_from_frame(df: pd.DataFrame, frame_rate: float = 25.0, source: str = "<frame>") -> list[RawTrack]:
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"{source}: missing required column(s) {missing}")
    cols = list(REQUIRED_COLUMNS) + (["length"] if "length" in df.columns else [])
    numeric = df[cols].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1)
    if bad.any():
        rows = (np.flatnonzero(bad.to_numpy())[:5] + 2).tolist()  # 1-based, after header
        raise FormatError(f"{source}: non-numeric or empty values at line(s) {rows}")
    if (numeric["xVelocity"] < 0).any():
        row = int(np.flatnonzero((numeric["xVelocity"] < 0).to_numpy())[0]) + 2
        raise FormatError(f"{source}: negative xVelocity at line {row}; positions and speeds "
                          "must be expressed along the direction of travel")
    if "length" not in numeric.columns:
        log.warning("%s: no 'length' column, vehicle lengths treated as zero", source)
        numeric["length"] = 0.0

    tracks = []
    for tid, g in numeric.groupby("id", sort=True):
        g = g.sort_values("frame")
        frames = g["frame"].to_numpy(dtype=np.int64)
        if len(frames) > 1:
            steps = np.diff(frames)
            if (steps <= 0).any() or (steps != steps[0]).any():
                raise FormatError(f"{source}: track {int(tid)} frames are not strictly increasing "
                                  "with a constant step")
        tracks.append(RawTrack(
            track_id=int(tid),
            time=frames / float(frame_rate),
            x=g["x"].to_numpy(dtype=float),
            speed=g["xVelocity"].to_numpy(dtype=float),
            preceding_id=g["precedingId"].to_numpy(dtype=np.int64),
            length=float(g["length"].iloc[0]),
        ))
    return tracks


def downsample(track: RawTrack, factor: int) -> RawTrack:
    """Keep every ``factor``-th frame, starting from the first (no filtering)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if len(track) == 0:
        raise EmptyInput(f"track {track.track_id} has no frames")
    sl = slice(None, None, factor)
    return RawTrack(track.track_id, track.time[sl], track.x[sl], track.speed[sl],
                    track.preceding_id[sl], track.length)


def _common_dt(tracks: Sequence[RawTrack]) -> float:
    dts = {round(t.dt, 9) for t in tracks if len(t) > 1}
    if len(dts) > 1:
        raise FormatError(f"tracks have inconsistent sampling intervals: {sorted(dts)}")
    return dts.pop() if dts else float("nan")


def _runs(mask: np.ndarray, labels: np.ndarray) -> Iterable[tuple[int, int]]:
    """Maximal [start, stop) runs where mask holds and labels stay constant."""
    n = len(mask)
    i = 0
    while i < n:
        if not mask[i]:
            i += 1
            continue
        j = i + 1
        while j < n and mask[j] and labels[j] == labels[i]:
            j += 1
        yield i, j
        i = j


def extract_segments(tracks: Sequence[RawTrack], t_min: float = 40.0,
                     eps_kin: float | None = 0.5) -> list[Segment]:
    """Split every follower track into single-leader segments of at least ``t_min`` s.

    A leader change, a missing leader frame or a non-positive gap ends a
    segment.  With ``eps_kin`` set, segments whose gap evolution disagrees
    with the relative speed by more than ``eps_kin`` metres in one step are
    dropped.
    """
    if not tracks:
        return []
    dt = _common_dt(tracks)
    by_id = {t.track_id: t for t in tracks}
    min_steps = int(np.ceil(t_min / dt - 1e-9)) if np.isfinite(dt) else 1
    segments = []
    for f in tracks:
        lead_ids = f.preceding_id
        # look up the leader's sample at each follower time stamp
        lx = np.full(len(f), np.nan)
        lv = np.full(len(f), np.nan)
        llen = np.zeros(len(f))
        for lid in np.unique(lead_ids[lead_ids > 0]):
            lead = by_id.get(int(lid))
            if lead is None:
                continue
            rows = np.flatnonzero(lead_ids == lid)
            idx = np.searchsorted(lead.time, f.time[rows])
            idx_c = np.clip(idx, 0, len(lead) - 1)
            hit = np.abs(lead.time[idx_c] - f.time[rows]) < 1e-6
            lx[rows[hit]] = lead.x[idx_c[hit]]
            lv[rows[hit]] = lead.speed[idx_c[hit]]
            llen[rows] = lead.length
        gap = lx - llen - f.x
        ok = (lead_ids > 0) & np.isfinite(lx) & (gap > 0)
        for start, stop in _runs(ok, lead_ids):
            if stop - start < min_steps:
                continue
            s = gap[start:stop]
            v = f.speed[start:stop]
            v_lead = lv[start:stop]
            if eps_kin is not None and stop - start > 1:
                resid = np.abs(np.diff(s) - (v_lead[:-1] - v[:-1]) * dt)
                if resid.max() > eps_kin:
                    log.warning("follower %d / leader %d: gap inconsistent with relative speed "
                                "(max %.3f m), segment dropped", f.track_id, lead_ids[start], resid.max())
                    continue
            states = np.column_stack([s, v, v - v_lead])
            leader = np.column_stack([v_lead, finite_diff_accel(v_lead, dt)])
            segments.append(Segment(f.track_id, int(lead_ids[start]), dt, states, leader,
                                    float(f.time[start])))
    return segments


def extract_windows(seg: Segment, length: int, stride: int) -> list[ObsWindow]:
    """Sliding windows at offsets 0, stride, 2*stride, ... that fit in the segment."""
    n = len(seg)
    if length > n:
        raise InsufficientLength(f"window length {length} exceeds segment length {n}")
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    return [ObsWindow(o, seg.states[o:o + length], seg.leader[o:o + length, 0],
                      seg.leader[o:o + length, 1])
            for o in range(0, n - length + 1, stride)]


def split_by_follower(segments: Sequence[Segment], ratios: Sequence[float] = (0.6, 0.1, 0.3),
                      seed: int = 0) -> SplitAssignment:
    """Seeded shuffle of follower IDs, then a prefix cut weighted by segment count."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    counts: dict[int, int] = {}
    for seg in segments:
        counts[seg.follower_id] = counts.get(seg.follower_id, 0) + 1
    ids = np.array(sorted(counts), dtype=np.int64)
    nonzero = np.flatnonzero(ratios > 0)
    if len(ids) < len(nonzero):
        raise InsufficientData(f"{len(ids)} follower IDs cannot fill {len(nonzero)} non-empty splits")
    ids = ids[np.random.default_rng(seed).permutation(len(ids))]
    w = np.array([counts[i] for i in ids], dtype=float)
    mid = np.cumsum(w) - w / 2.0
    bounds = np.cumsum(ratios) * w.sum()
    which = np.minimum(np.searchsorted(bounds, mid, side="right"), 2)
    # every split with a non-zero ratio gets at least one follower
    for k in nonzero:
        if not (which == k).any():
            donor = np.bincount(which, minlength=3).argmax()
            cand = np.flatnonzero(which == donor)
            which[cand[0] if k < donor else cand[-1]] = k
    return SplitAssignment({int(i): SPLITS[k] for i, k in zip(ids, which)})


# -- columnar segment files ------------------------------------------------

SEGMENT_COLUMNS = ["segment", "follower_id", "leader_id", "step", "s", "v", "dv", "v_lead", "a_lead"]


def write_segments(path: str | Path, segments: Sequence[Segment], meta: dict) -> None:
    """One row per time step; a ``# {json}`` metadata header precedes the CSV."""
    rows = []
    for k, seg in enumerate(segments):
        n = len(seg)
        rows.append(np.column_stack([
            np.full(n, k), np.full(n, seg.follower_id), np.full(n, seg.leader_id), np.arange(n),
            seg.states, seg.leader,
        ]))
    table = pd.DataFrame(np.vstack(rows) if rows else np.empty((0, len(SEGMENT_COLUMNS))),
                         columns=SEGMENT_COLUMNS)
    for c in SEGMENT_COLUMNS[:4]:
        table[c] = table[c].astype(np.int64)
    meta = dict(meta)
    meta.setdefault("dt", segments[0].dt if segments else None)
    meta["t0"] = [seg.t0 for seg in segments]
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        table.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")


def read_segments(path: str | Path) -> tuple[list[Segment], dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise FormatError(f"{path}: missing metadata header")
        meta = json.loads(first[2:])
        table = pd.read_csv(fh, float_precision="round_trip")
    missing = [c for c in SEGMENT_COLUMNS if c not in table.columns]
    if missing:
        raise FormatError(f"{path}: missing column(s) {missing}")
    dt = float(meta["dt"]) if meta.get("dt") is not None else float("nan")
    t0 = meta.get("t0", [])
    segments = []
    for k, g in table.groupby("segment", sort=True):
        g = g.sort_values("step")
        segments.append(Segment(int(g["follower_id"].iloc[0]), int(g["leader_id"].iloc[0]), dt,
                                g[["s", "v", "dv"]].to_numpy(dtype=float),
                                g[["v_lead", "a_lead"]].to_numpy(dtype=float),
                                float(t0[int(k)]) if int(k) < len(t0) else 0.0))
    return segments, meta
