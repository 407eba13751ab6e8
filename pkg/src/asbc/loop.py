"""Active amortized training loop.

Round 0 simulates prior draws under real leader windows and trains the
posterior model.  Every later round proposes parameters from a prior /
pooled-posterior mixture, pairs the most uncertain ones with leader windows
from the round's real/synthetic mixture, greedily selects a batch by
uncertainty x representativeness minus a diversity penalty, simulates it
into a FIFO buffer and fine-tunes the model.  Rounds stop early once the
NLL on a fixed synthetic hold-out stops improving.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import seeding
from .bank import LeaderBank, LeaderWindow, schedule_value
from .encoder import EncoderConfig, set_dropout
from .errors import ConfigError, PipelineError
from .flow import FlowConfig, PosteriorModel, from_physical, mc_dropout_alpha
from .sim import THETA_REC, ResidualSpec, in_prior_box, integrate, sample_prior_array, sample_residuals

log = logging.getLogger(__name__)

VARIANTS = ("full", "prior_only", "theta_only")
LAMBDA_SCHEDULE = tuple(round(1.0 - 0.1 * i, 1) for i in range(11))
ALPHA_SCHEDULE = (0.0, 0.1, 0.2, 0.3)


@dataclass(frozen=True)
class LoopConfig:
    R: int = 10
    B0: int = 4000
    samples_per_round: int = 5000
    B: int = 2000
    buffer_capacity: int = 4000
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    min_rounds: int = 3
    patience: int = 1
    min_delta: float = 1e-3
    lambda_schedule: tuple[float, ...] = LAMBDA_SCHEDULE
    alpha_schedule: tuple[float, ...] = ALPHA_SCHEDULE
    K_candidates: int = 5000
    pairs_per_theta: int = 10
    gamma: float = 0.1
    tau_L: float = 1.0
    tau_theta: float = 1.0
    M: int = 20
    eps_alpha: float = 1e-6
    obs_subset_size: int = 200
    holdout_size: int = 200
    val_fraction: float = 0.1
    epoch_patience: int = 10
    max_failure_rate: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.B0, self.B, self.buffer_capacity, self.batch_size, self.epochs, self.M - 1) < 1:
            raise ConfigError("budget sizes must be positive and M >= 2")
        if self.R < 0:
            raise ConfigError("R must be >= 0")


# -- buffer ------------------------------------------------------------------

class ReplayBuffer:
    """Bounded FIFO of (theta, x_sim) pairs; the oldest pairs are evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, theta: np.ndarray, x: np.ndarray) -> None:
        self._items.append((np.asarray(theta, dtype=float), np.asarray(x, dtype=float)))

    def extend(self, thetas: np.ndarray, xs: np.ndarray) -> None:
        for th, x in zip(thetas, xs):
            self.push(th, x)

    def items(self) -> list:
        return list(self._items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._items:
            raise ValueError("buffer is empty")
        th, x = zip(*self._items)
        return np.stack(th), np.stack(x)


# -- simulation --------------------------------------------------------------

def default_init(v_lead: np.ndarray) -> np.ndarray:
    """Follower start used when a leader window carries no observed state:
    matched speed at the recommended-parameter equilibrium-ish headway."""
    v = float(v_lead[0])
    return np.array([THETA_REC[1] + v * THETA_REC[2], v, 0.0])


def simulate_pairs(theta: np.ndarray, windows: Sequence[LeaderWindow], spec: ResidualSpec, dt: float,
                   root_seed: int, stage: str, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Simulate pair ``i`` with the random stream ``(stage, offset + i)``.

    Returns follower trajectories (B, W, 3) and degeneracy flags (B,).
    """
    theta = np.atleast_2d(theta)
    v_lead = np.stack([w.v for w in windows])
    init = np.stack([w.init if w.init is not None else default_init(w.v) for w in windows])
    init = init.copy()
    init[:, 2] = init[:, 1] - v_lead[:, 0]
    rngs = [seeding.stream(root_seed, stage, offset + i) for i in range(len(theta))]
    resid = sample_residuals(spec, theta, v_lead.shape[1], dt, rngs)
    states, _, flags = integrate(theta, init, v_lead, dt, resid)
    return states, flags


@dataclass
class Simulator:
    """Counts calls so budgets can be audited."""
    spec: ResidualSpec
    dt: float
    root_seed: int
    calls: int = 0

    def __call__(self, theta, windows, stage: str, count: bool = True, max_failure_rate: float = 1.0):
        x, flags = simulate_pairs(theta, windows, self.spec, self.dt, self.root_seed, stage)
        bad = flags | ~np.isfinite(x).all(axis=(1, 2))
        if len(bad) and bad.mean() > max_failure_rate:
            raise PipelineError(f"{stage}: {bad.mean():.0%} of simulations degenerate "
                                f"(limit {max_failure_rate:.0%})")
        if count:
            self.calls += len(theta)
        return x, flags


# -- proposal ----------------------------------------------------------------

@dataclass(frozen=True)
class ProposalState:
    pool: np.ndarray
    lam: float


def build_proposal_state(model: PosteriorModel, observed: np.ndarray, samples_per_obs: int,
                         generator: torch.Generator, lam: float = 1.0) -> ProposalState:
    if len(observed) == 0:
        raise ValueError("observed subset is empty")
    model.eval()
    samples = model.posterior_samples(observed, samples_per_obs, generator)
    return ProposalState(samples.reshape(-1, samples.shape[-1]), lam)


def propose_params(lam: float, spec: ResidualSpec, state: ProposalState | None, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` parameters: prior with probability ``lam``, else a uniform
    resample of the pooled posterior set.  Returns (theta, from_prior)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    from_prior = rng.random(n) < lam
    if not from_prior.all() and (state is None or len(state.pool) == 0):
        raise ValueError("pooled posterior set is empty but lambda < 1")
    theta = np.empty((n, spec.dim))
    k = int(from_prior.sum())
    if k:
        theta[from_prior] = sample_prior_array(spec, k, rng)
    if k < n:
        theta[~from_prior] = state.pool[rng.integers(0, len(state.pool), n - k)]
    return theta, from_prior


# -- acquisition -------------------------------------------------------------

def divpen(sel_feats: np.ndarray, sel_theta: np.ndarray, cand_feat: np.ndarray, cand_theta: np.ndarray,
           tau_L: float, tau_theta: float, sigma_theta: np.ndarray) -> float:
    """Mean joint similarity kernel between a candidate pair and the selected set (0 when empty)."""
    sel_feats = np.atleast_2d(sel_feats)
    if sel_feats.size == 0:
        return 0.0
    dL2 = ((sel_feats - cand_feat) ** 2).sum(1)
    dT2 = (((np.atleast_2d(sel_theta) - cand_theta) / sigma_theta) ** 2).sum(1)
    return float(np.exp(-dL2 / tau_L ** 2 - dT2 / tau_theta ** 2).mean())


def greedy_select(alpha: np.ndarray, rho: np.ndarray, feats: np.ndarray, theta: np.ndarray, B: int,
                  gamma: float, tau_L: float, tau_theta: float, sigma_theta: np.ndarray) -> np.ndarray:
    """Greedy maximization of alpha*rho - gamma*divpen over candidate pairs.

    The penalty of every remaining candidate is kept as a running kernel sum,
    so each step costs one pass over the pool.
    """
    n = len(alpha)
    if B > n:
        raise ConfigError(f"candidate pool ({n}) smaller than batch size ({B})")
    base = np.asarray(alpha, dtype=float) * np.asarray(rho, dtype=float)
    tw = theta / sigma_theta
    ksum = np.zeros(n)
    taken = np.zeros(n, dtype=bool)
    order = np.empty(B, dtype=np.int64)
    for k in range(B):
        score = base - gamma * (ksum / k if k else 0.0)
        score[taken] = -np.inf
        j = int(np.argmax(score))
        order[k], taken[j] = j, True
        if gamma != 0.0 and k + 1 < B:
            dL2 = ((feats - feats[j]) ** 2).sum(1)
            dT2 = ((tw - tw[j]) ** 2).sum(1)
            ksum += np.exp(-dL2 / tau_L ** 2 - dT2 / tau_theta ** 2)
    return order


def theta_scale(buffer_theta: np.ndarray) -> np.ndarray:
    return np.maximum(buffer_theta.std(axis=0), 1e-6)


@dataclass
class Acquisition:
    theta: np.ndarray
    windows: list[LeaderWindow]
    alpha: np.ndarray
    rho: np.ndarray
    from_syn: np.ndarray


def acquire_pairs(model: PosteriorModel, theta_cand: np.ndarray, bank: LeaderBank, alpha_r: float,
                  obs_subset: np.ndarray, sigma_theta: np.ndarray, cfg: LoopConfig,
                  rng: np.random.Generator, generator: torch.Generator) -> Acquisition:
    alpha = mc_dropout_alpha(model, theta_cand, obs_subset, cfg.M, cfg.eps_alpha, generator)
    if cfg.variant == "theta_only":
        if cfg.B > len(theta_cand):
            raise ConfigError(f"candidate pool ({len(theta_cand)}) smaller than batch size ({cfg.B})")
        top = np.argsort(-alpha, kind="stable")[:cfg.B]
        idx = rng.integers(0, len(bank.real), cfg.B)
        return Acquisition(theta_cand[top], [bank.real[i] for i in idx], alpha[top],
                           bank.rho_real[idx], np.zeros(cfg.B, dtype=bool))
    keep = np.argsort(-alpha, kind="stable")[:cfg.K_candidates]
    P = cfg.pairs_per_theta
    th_idx = np.repeat(keep, P)
    idx, from_syn, feats, rho = bank.draw(alpha_r, len(th_idx), rng)
    order = greedy_select(alpha[th_idx], rho, feats, theta_cand[th_idx], cfg.B, cfg.gamma,
                          cfg.tau_L, cfg.tau_theta, sigma_theta)
    windows = [bank.window(int(idx[j]), bool(from_syn[j])) for j in order]
    return Acquisition(theta_cand[th_idx[order]], windows, alpha[th_idx[order]], rho[order], from_syn[order])


# -- early stopping ----------------------------------------------------------

def should_stop(history: Sequence[float], min_rounds: int = 3, patience: int = 1,
                min_delta: float = 1e-3) -> bool:
    """history[r] is the hold-out NLL after round r (r = 0 is warm-up).

    A round is stale unless it beats the best earlier value by at least
    ``min_delta``; stop once the current round is >= ``min_rounds`` and the
    trailing stale run is longer than ``patience``.
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    best, stale = history[0], 0
    for h in history[1:]:
        if h < best - min_delta:
            best, stale = h, 0
        else:
            stale += 1
            best = min(best, h)
    return len(history) - 1 >= min_rounds and stale > patience


# -- hold-out ----------------------------------------------------------------

@dataclass(frozen=True)
class Holdout:
    theta: np.ndarray
    x: np.ndarray
    seed: int

    def __post_init__(self):
        self.theta.flags.writeable = False
        self.x.flags.writeable = False


def make_synthetic_holdout(spec: ResidualSpec, bank: LeaderBank, n: int, seed: int) -> Holdout:
    rng = seeding.stream(seed, "holdout")
    theta = sample_prior_array(spec, n, rng)
    windows = [bank.real[i] for i in rng.integers(0, len(bank.real), n)]
    x, _ = simulate_pairs(theta, windows, spec, bank.cfg.dt, seed, "holdout-sim")
    return Holdout(theta, x, seed)


# -- training ----------------------------------------------------------------

def fit_normalizations(model: PosteriorModel, theta: np.ndarray, x: np.ndarray) -> None:
    flat = x.reshape(-1, x.shape[-1])
    model.encoder.set_input_normalization(flat.mean(0), flat.std(0))
    u = from_physical(theta, model.eps)
    model.flow.set_standardization(u.mean(0), u.std(0))


def train_model(model: PosteriorModel, theta: np.ndarray, x: np.ndarray, cfg: LoopConfig,
                generator: torch.Generator) -> dict:
    """Adam on the NLL with a random validation slice and patience-based stopping;
    the best-validation weights are restored."""
    n = len(theta)
    perm = torch.randperm(n, generator=generator).numpy()
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val, tr = perm[:n_val], perm[n_val:]
    th_t, x_t = model.tensor(theta), model.tensor(x)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best, best_state, stale, epochs = math.inf, None, 0, 0
    for epoch in range(cfg.epochs):
        model.train()
        set_dropout(model, "train", generator)
        order = tr[torch.randperm(len(tr), generator=generator).numpy()]
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            opt.zero_grad()
            loss = model.nll_loss(th_t[b], x_t[b])
            loss.backward()
            opt.step()
        set_dropout(model, "off")
        model.eval()
        epochs = epoch + 1
        if n_val == 0:
            continue
        v = model.mean_nll(th_t[val], x_t[val])
        if v < best - 1e-6:
            best, stale = v, 0
            best_state = {k: t.detach().clone() for k, t in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.epoch_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return {"epochs": epochs, "val_nll": best if n_val else float("nan")}


# -- loop --------------------------------------------------------------------

@dataclass
class RoundReport:
    round: int
    holdout_nll: float
    sim_calls: int
    buffer_size: int
    lam: float
    alpha_mix: float
    epochs: int
    val_nll: float
    seconds: float
    frac_synthetic: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class LoopState:
    model: PosteriorModel
    buffer: ReplayBuffer
    simulator: Simulator
    holdout: Holdout
    obs_subset: np.ndarray
    history: list[float] = field(default_factory=list)
    reports: list[RoundReport] = field(default_factory=list)
    proposal: ProposalState | None = None

    @property
    def round(self) -> int:
        return len(self.history) - 1


def holdout_nll(model: PosteriorModel, holdout: Holdout) -> float:
    model.eval()
    return model.mean_nll(holdout.theta, holdout.x)


def warmup(cfg: LoopConfig, spec: ResidualSpec, bank: LeaderBank, obs_subset: np.ndarray, root_seed: int,
           encoder_cfg: EncoderConfig = EncoderConfig(), flow_cfg: FlowConfig | None = None,
           holdout: Holdout | None = None, dtype: torch.dtype = torch.float32) -> LoopState:
    if not bank.real:
        raise ConfigError("leader bank is empty")
    if len(obs_subset) == 0:
        raise ConfigError("observed subset is empty")
    t0 = time.perf_counter()
    torch.manual_seed(seeding.derive_seed(root_seed, "init"))
    model = PosteriorModel(encoder_cfg, flow_cfg, spec).to(dtype)
    sim = Simulator(spec, bank.cfg.dt, root_seed)
    if holdout is None:
        holdout = make_synthetic_holdout(spec, bank, cfg.holdout_size, seeding.derive_seed(root_seed, "holdout"))
    rng = seeding.stream(root_seed, "warmup")
    theta = sample_prior_array(spec, cfg.B0, rng)
    windows = [bank.real[i] for i in rng.integers(0, len(bank.real), cfg.B0)]
    x, _ = sim(theta, windows, "sim-r0", max_failure_rate=cfg.max_failure_rate)
    buf = ReplayBuffer(cfg.buffer_capacity)
    buf.extend(theta, x)
    th_b, x_b = buf.arrays()
    fit_normalizations(model, th_b, x_b)
    state = LoopState(model, buf, sim, holdout, np.asarray(obs_subset, dtype=float))
    info = train_model(model, th_b, x_b, cfg, seeding.torch_generator(root_seed, "train", 0))
    nll = holdout_nll(model, holdout)
    state.history.append(nll)
    state.reports.append(RoundReport(0, nll, sim.calls, len(buf), 1.0, 0.0, info["epochs"], info["val_nll"],
                                     time.perf_counter() - t0))
    log.info("warm-up: hold-out NLL %.4f after %d epochs", nll, info["epochs"])
    return state


def run_round(state: LoopState, cfg: LoopConfig, bank: LeaderBank, root_seed: int) -> RoundReport:
    r = state.round + 1
    t0 = time.perf_counter()
    model, spec = state.model, state.model.residual
    rng = seeding.stream(root_seed, "round", r)
    lam = 1.0 if cfg.variant == "prior_only" else schedule_value(cfg.lambda_schedule, r, "lambda")
    alpha_mix = schedule_value(cfg.alpha_schedule, r, "alpha")
    if lam < 1.0:
        spo = max(1, math.ceil(cfg.samples_per_round / len(state.obs_subset)))
        state.proposal = build_proposal_state(model, state.obs_subset, spo,
                                              seeding.torch_generator(root_seed, "proposal", r), lam)
    theta_cand, _ = propose_params(lam, spec, state.proposal, cfg.samples_per_round, rng)
    sigma_theta = theta_scale(state.buffer.arrays()[0])
    acq = acquire_pairs(model, theta_cand, bank, alpha_mix, state.obs_subset, sigma_theta, cfg, rng,
                        seeding.torch_generator(root_seed, "alpha", r))
    x, flags = state.simulator(acq.theta, acq.windows, f"sim-r{r}", max_failure_rate=cfg.max_failure_rate)
    state.buffer.extend(acq.theta, x)
    info = train_model(model, *state.buffer.arrays(), cfg, seeding.torch_generator(root_seed, "train", r))
    nll = holdout_nll(model, state.holdout)
    state.history.append(nll)
    rep = RoundReport(r, nll, state.simulator.calls, len(state.buffer), lam, alpha_mix, info["epochs"],
                      info["val_nll"], time.perf_counter() - t0, float(acq.from_syn.mean()),
                      {"flagged": int(flags.sum()), "in_box": float(in_prior_box(acq.theta[:, :5]).mean())})
    state.reports.append(rep)
    log.info("round %d: hold-out NLL %.4f, sims %d", r, nll, rep.sim_calls)
    return rep


def observed_subset(observed: np.ndarray, size: int, root_seed: int) -> np.ndarray:
    observed = np.asarray(observed, dtype=float)
    pick = seeding.stream(root_seed, "obs-subset").permutation(len(observed))[:size]
    return observed[np.sort(pick)]


def warmup_for(cfg: LoopConfig, spec: ResidualSpec, bank: LeaderBank, observed: np.ndarray, root_seed: int,
               encoder_cfg: EncoderConfig | None = None, holdout: Holdout | None = None,
               flow_cfg: FlowConfig | None = None, dtype: torch.dtype = torch.float32) -> LoopState:
    return warmup(cfg, spec, bank, observed_subset(observed, cfg.obs_subset_size, root_seed), root_seed,
                  encoder_cfg or EncoderConfig(), flow_cfg, holdout, dtype)


def run_active_loop(cfg: LoopConfig, spec: ResidualSpec, bank: LeaderBank, observed: np.ndarray, root_seed: int,
                    encoder_cfg: EncoderConfig = EncoderConfig(), flow_cfg: FlowConfig | None = None,
                    holdout: Holdout | None = None, checkpoint_dir: str | Path | None = None,
                    run_log: str | Path | None = None, dtype: torch.dtype = torch.float32,
                    on_round: Callable[[LoopState], None] | None = None) -> LoopState:
    """Warm-up plus up to ``cfg.R`` rounds with cross-round early stopping."""
    state = warmup_for(cfg, spec, bank, observed, root_seed, encoder_cfg, holdout, flow_cfg, dtype)
    return run_from_state(state, cfg, bank, root_seed, checkpoint_dir, run_log, on_round, record_warmup=True)


def run_from_state(state: LoopState, cfg: LoopConfig, bank: LeaderBank, root_seed: int,
                   checkpoint_dir: str | Path | None = None, run_log: str | Path | None = None,
                   on_round: Callable[[LoopState], None] | None = None,
                   record_warmup: bool = False) -> LoopState:
    """Continue a loop (typically right after warm-up) until ``cfg.R`` rounds or early stop."""

    def record():
        rep = state.reports[-1]
        if run_log is not None:
            with open(run_log, "a") as fh:
                fh.write(rep.to_json() + "\n")
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            state.model.save(Path(checkpoint_dir) / f"round_{rep.round:02d}.pt",
                             {"round": rep.round, "seed": root_seed, "variant": cfg.variant})
        if on_round is not None:
            on_round(state)

    if record_warmup:
        record()
    while state.round < cfg.R:
        run_round(state, cfg, bank, root_seed)
        record()
        if should_stop(state.history, cfg.min_rounds, cfg.patience, cfg.min_delta):
            log.info("early stop after round %d", state.round)
            break
    state.model.provenance = {"round": state.round, "seed": root_seed, "variant": cfg.variant,
                              "sim_calls": state.simulator.calls}
    return state
