"""Windowed short-horizon probabilistic evaluation and calibration diagnostics."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch
from scipy import stats
from scipy.spatial.distance import pdist

from . import seeding
from .data import Segment
from .encoder import pad_or_crop
from .errors import ConfigError, ShapeError
from .sim import ResidualSpec, integrate, sample_residuals

VARIABLES = ("s", "v", "a")


@dataclass(frozen=True)
class EvalConfig:
    H: int = 50
    stride: int = 20
    m: int = 20
    n_samples: int = 500
    level: float = 0.95
    target_len: int = 75
    exclude_flagged: bool = False

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if min(self.H, self.stride, self.m, self.target_len) < 1:
            raise ConfigError("H, stride, m and target_len must be positive")


# -- scoring rules -----------------------------------------------------------

def _check(truth, samples):
    truth = np.asarray(truth, dtype=float)
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if truth.ndim == 0:
        truth = truth[None]
    if samples.shape[0] < 1:
        raise ShapeError("at least one sample is required")
    if samples.shape[1:] != truth.shape:
        raise ShapeError(f"samples {samples.shape} do not match truth {truth.shape}")
    return truth, samples.reshape(len(samples), -1)


def rmse(truth, samples) -> float:
    """RMSE of the sample mean against the truth."""
    truth, samples = _check(truth, samples)
    return float(np.sqrt(np.mean((samples.mean(0) - truth.ravel()) ** 2)))


def energy_score(truth, samples) -> float:
    truth, samples = _check(truth, samples)
    n = len(samples)
    first = np.linalg.norm(samples - truth.ravel(), axis=1).mean()
    second = 2.0 * pdist(samples).sum() / (2.0 * n * n) if n > 1 else 0.0
    return float(first - second)


def prediction_interval(samples, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    samples = np.asarray(samples, dtype=float)
    if not 0.0 <= level < 1.0:
        raise ConfigError("level must lie in [0, 1)")
    if len(samples) < math.ceil(1.0 / (1.0 - level) - 1e-9):
        raise ConfigError(f"{len(samples)} samples are too few for a {level:.0%} interval")
    q = (1.0 - level) / 2.0
    return np.quantile(samples, q, axis=0), np.quantile(samples, 1.0 - q, axis=0)


def relative_change(es_ablation: float, es_full: float) -> float:
    """Percent by which the full model improves on an ablation."""
    return (es_ablation - es_full) / es_ablation * 100.0


# -- windowed rollouts -------------------------------------------------------

@dataclass
class WindowResult:
    pair_id: int
    offset: int
    rmse: dict
    es: dict
    pi_lo: dict
    pi_hi: dict
    n_samples: int
    n_flagged: int
    n_used: int
    context_overlap: bool = False

    @property
    def es_mean(self) -> float:
        return float(np.mean([self.es[k] for k in VARIABLES]))

    def row(self) -> dict:
        out = {"pair_id": self.pair_id, "offset": self.offset}
        out.update({f"rmse_{k}": self.rmse[k] for k in VARIABLES})
        out.update({f"es_{k}": self.es[k] for k in VARIABLES})
        out["es_mean"] = self.es_mean
        out.update(n_samples=self.n_samples, n_flagged=self.n_flagged, n_used=self.n_used,
                   context_overlap=int(self.context_overlap))
        return out


def eval_layout(n: int, cfg: EvalConfig) -> tuple[slice, list[int], bool]:
    """Conditioning slice, evaluation offsets and whether they overlap.

    The conditioning window is the ``target_len`` steps before the first
    evaluation window; without enough history the earliest steps are used
    and evaluation windows start at 0 (flagged).
    """
    if n < cfg.H:
        raise ShapeError(f"segment of {n} steps is shorter than the horizon {cfg.H}")
    first = cfg.target_len
    overlap = first + cfg.H > n
    if overlap:
        first = 0
    offsets = list(range(first, n - cfg.H + 1, cfg.stride))[:cfg.m]
    return slice(0, min(cfg.target_len, n)), offsets, overlap


def conditioning_window(seg: Segment, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    sl, _, _ = eval_layout(len(seg), cfg)
    return pad_or_crop(seg.states[sl], cfg.target_len)


def rollout_samples(theta: np.ndarray, seg: Segment, offset: int, H: int, spec: ResidualSpec,
                    root_seed: int, stage: str):
    init = seg.states[offset][None]
    v_lead = seg.leader[offset:offset + H, 0][None]
    rngs = [seeding.stream(root_seed, stage, i) for i in range(len(theta))]
    resid = sample_residuals(spec, theta, H, seg.dt, rngs)
    return integrate(theta, init, v_lead, seg.dt, resid)


def evaluate_pair(model, seg: Segment, cfg: EvalConfig, root_seed: int, pair_id: int = 0,
                  theta_samples: np.ndarray | None = None, spec: ResidualSpec | None = None) -> list[WindowResult]:
    """Posterior-predictive metrics on the evaluation windows of one pair.

    With ``theta_samples`` given the model is not consulted (e.g. prior
    predictive baselines); otherwise ``n_samples`` draws are taken from the
    model conditioned on the pair's conditioning window.
    """
    sl, offsets, overlap = eval_layout(len(seg), cfg)
    if spec is None:
        spec = model.residual
    if theta_samples is None:
        x, valid = conditioning_window(seg, cfg)
        gen = seeding.torch_generator(root_seed, "eval-posterior", pair_id)
        with torch.no_grad():
            c = model.context(x, valid=valid)
            theta_samples = model.sample_theta(c, cfg.n_samples, gen)
    theta_samples = np.asarray(theta_samples, dtype=float)
    truth_acc = seg.follower_accel
    results = []
    for k, o in enumerate(offsets):
        states, accel, flags = rollout_samples(theta_samples, seg, o, cfg.H, spec, root_seed,
                                               f"eval-rollout-{pair_id}-{k}")
        use = ~flags if cfg.exclude_flagged else np.ones(len(flags), dtype=bool)
        if not use.any():
            use = np.ones(len(flags), dtype=bool)
        sims = {"s": states[use, :, 0], "v": states[use, :, 1], "a": accel[use]}
        truth = {"s": seg.states[o:o + cfg.H, 0], "v": seg.states[o:o + cfg.H, 1], "a": truth_acc[o:o + cfg.H]}
        lo, hi = {}, {}
        can_pi = use.sum() >= math.ceil(1.0 / (1.0 - cfg.level) - 1e-9)
        for kk in VARIABLES:
            if can_pi:
                lo[kk], hi[kk] = prediction_interval(sims[kk], cfg.level)
        results.append(WindowResult(
            pair_id, o,
            {kk: rmse(truth[kk], sims[kk]) for kk in VARIABLES},
            {kk: energy_score(truth[kk], sims[kk]) for kk in VARIABLES},
            lo, hi, len(flags), int(flags.sum()), int(use.sum()), overlap))
    return results


def evaluate_pairs(model, segments: Sequence[Segment], cfg: EvalConfig, root_seed: int,
                   theta_samples: Sequence[np.ndarray] | None = None,
                   spec: ResidualSpec | None = None) -> list[WindowResult]:
    out = []
    for i, seg in enumerate(segments):
        ts = None if theta_samples is None else theta_samples[i]
        out.extend(evaluate_pair(model, seg, cfg, root_seed, i, ts, spec))
    return out


def results_frame(results: Sequence[WindowResult]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in results])


def summarize(results: Sequence[WindowResult]) -> dict:
    df = results_frame(results)
    metrics = [c for c in df.columns if c.startswith(("rmse_", "es_"))]
    return {
        "n_windows": int(len(df)),
        "n_pairs": int(df["pair_id"].nunique()) if len(df) else 0,
        "n_flagged": int(df["n_flagged"].sum()) if len(df) else 0,
        "mean": {m: float(df[m].mean()) for m in metrics},
        "std": {m: float(df[m].std(ddof=0)) for m in metrics},
    }


# -- calibration -------------------------------------------------------------

def sbc_ranks(model, theta_true: np.ndarray, x: np.ndarray, n_samples: int,
              generator: torch.Generator | None = None) -> np.ndarray:
    """Rank of each true parameter among ``n_samples`` posterior draws: (N, D) in [0, n]."""
    samples = model.posterior_samples(x, n_samples, generator)
    return ranks_from_samples(theta_true, samples)


def ranks_from_samples(theta_true: np.ndarray, samples: np.ndarray) -> np.ndarray:
    return (samples < np.asarray(theta_true)[:, None, :]).sum(axis=1)


def rank_histogram(ranks: np.ndarray, n_samples: int, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Counts per bin and the exact bin probabilities under uniform ranks on {0..n}."""
    ranks = np.asarray(ranks)
    if ranks.ndim == 1:
        ranks = ranks[:, None]
    which = np.arange(n_samples + 1) * bins // (n_samples + 1)
    probs = np.bincount(which, minlength=bins) / (n_samples + 1.0)
    counts = np.stack([np.bincount(which[ranks[:, d]], minlength=bins) for d in range(ranks.shape[1])])
    return counts, probs


def sbc_chi2(ranks: np.ndarray, n_samples: int, bins: int = 20) -> np.ndarray:
    """Chi-square uniformity p-value per parameter."""
    counts, probs = rank_histogram(ranks, n_samples, bins)
    keep = probs > 0
    n = counts.sum(axis=1, keepdims=True)
    return np.array([stats.chisquare(c[keep], n[i, 0] * probs[keep]).pvalue for i, c in enumerate(counts)])


def coverage(theta_true: np.ndarray, samples: np.ndarray, level: float = 0.9) -> np.ndarray:
    """Fraction of pairs whose central ``level`` credible interval holds the truth, per parameter."""
    q = (1.0 - level) / 2.0
    lo = np.quantile(samples, q, axis=1)
    hi = np.quantile(samples, 1.0 - q, axis=1)
    return ((theta_true >= lo) & (theta_true <= hi)).mean(axis=0)


# -- ablation ----------------------------------------------------------------

def run_ablation(loop_cfg, spec: ResidualSpec, bank, observed: np.ndarray, seeds: Sequence[int],
                 variants: Sequence[str] = ("full", "prior_only", "theta_only"), encoder_cfg=None,
                 holdout_fn=None, eval_fn=None) -> pd.DataFrame:
    """One active-loop run per (variant, seed) at the same simulation budget.

    ``holdout_fn(seed)`` supplies the hold-out shared by every variant of a
    seed; ``eval_fn(model, seed)`` may return extra metrics (e.g. mean ES).
    The warm-up depends only on the seed, so it is run once per seed.
    """
    import copy
    from dataclasses import replace

    from .loop import run_from_state, warmup_for
    rows = []
    for seed in seeds:
        hold = holdout_fn(seed) if holdout_fn else None
        base = warmup_for(loop_cfg, spec, bank, observed, seed, encoder_cfg, hold)
        for v in variants:
            cfg = replace(loop_cfg, variant=v)
            st = run_from_state(copy.deepcopy(base), cfg, bank, seed)
            row = {"variant": v, "seed": seed, "holdout_nll": st.history[-1], "rounds": st.round,
                   "sim_calls": st.simulator.calls}
            if eval_fn is not None:
                row.update(eval_fn(st.model, seed))
            rows.append(row)
    return pd.DataFrame(rows)


def ablation_table(df: pd.DataFrame, metric: str = "holdout_nll") -> pd.DataFrame:
    med = df.groupby("variant")[metric].agg(["median", "mean", "std"]).reset_index()
    if "full" in set(df["variant"]):
        full = float(med.loc[med["variant"] == "full", "median"].iloc[0])
        med["relative_change_pct"] = [relative_change(m, full) if m != 0 else float("nan") for m in med["median"]]
    return med


# -- outputs -----------------------------------------------------------------

def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_window_csv(results: Sequence[WindowResult], path: str | Path) -> None:
    results_frame(results).to_csv(path, index=False, float_format="%.10g")


def write_summary_json(results: Sequence[WindowResult], path: str | Path, seeds: Sequence[int],
                       config: dict) -> dict:
    summary = summarize(results)
    summary.update(seeds=list(seeds), config_hash=config_hash(config), config=config)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def error_distribution_data(results: Sequence[WindowResult]) -> pd.DataFrame:
    """Long-format per-window metrics for box plots."""
    df = results_frame(results)
    cols = [f"{m}_{k}" for m in ("rmse", "es") for k in VARIABLES]
    long = df.melt(id_vars=["pair_id", "offset"], value_vars=cols, var_name="metric", value_name="value")
    return long


def convergence_data(reports: Sequence[dict]) -> pd.DataFrame:
    return pd.DataFrame([{k: r[k] for k in ("round", "holdout_nll", "sim_calls", "val_nll", "lam", "alpha_mix")}
                         for r in reports])
