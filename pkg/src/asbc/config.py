"""Run configuration.

A flat text document, one ``key = value`` per line with JSON values and
``#`` comments.  Keys follow the implementation hyperparameter names
(``samples_initial``, ``train_buffer_size``, ...).  Unknown keys are
rejected, every value is range-checked on load, and ``dump`` emits a
document that loads back to an equal config.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bank import BankConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .flow import FlowConfig
from .loop import ALPHA_SCHEDULE, LAMBDA_SCHEDULE, LoopConfig
from .sim import ResidualKind, ResidualSpec

POS_INT, NONNEG_INT, POS, NONNEG, UNIT, OPEN_UNIT = "pos_int", "nonneg_int", "pos", "nonneg", "unit", "open_unit"


def _f(default, check=None, doc=""):
    return field(default=default, metadata={"check": check, "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    # data
    frame_rate: float = _f(25.0, POS, "raw sampling rate (Hz)")
    downsample_factor: int = _f(5, POS_INT)
    t_min: float = _f(40.0, POS, "minimum segment duration (s)")
    split_ratios: tuple = _f((0.6, 0.1, 0.3), "ratios")
    dt: float = _f(0.2, POS)
    residual: str = _f("iid_gaussian", "residual")
    # active loop
    R: int = _f(10, NONNEG_INT)
    samples_initial: int = _f(4000, POS_INT)
    samples_per_round: int = _f(5000, POS_INT)
    B: int = _f(2000, POS_INT)
    M: int = _f(20, "M")
    train_buffer_size: int = _f(4000, POS_INT)
    epochs: int = _f(100, POS_INT)
    batch_size: int = _f(128, POS_INT)
    lr: float = _f(1e-3, POS)
    min_rounds: int = _f(3, NONNEG_INT)
    patience_round: int = _f(1, NONNEG_INT)
    min_delta_round: float = _f(1e-3, NONNEG)
    lambda_schedule_base: tuple = _f(LAMBDA_SCHEDULE, "schedule")
    alpha_schedule_base: tuple = _f(ALPHA_SCHEDULE, "schedule")
    K_candidates: int = _f(5000, POS_INT)
    pairs_per_theta: int = _f(10, POS_INT)
    gamma: float = _f(0.1, NONNEG)
    tau_L: float = _f(1.0, POS)
    tau_theta: float = _f(1.0, POS)
    eps_alpha: float = _f(1e-6, POS)
    holdout_size: int = _f(200, POS_INT)
    val_fraction: float = _f(0.1, OPEN_UNIT)
    epoch_patience: int = _f(10, POS_INT)
    # encoder
    input_dim: int = _f(3, POS_INT)
    d_model: int = _f(64, POS_INT)
    layers: int = _f(2, POS_INT)
    heads: int = _f(4, POS_INT)
    local_window: int = _f(4, NONNEG_INT)
    dropout: float = _f(0.2, "dropout")
    ffn_mult: int = _f(4, POS_INT)
    encoder_target_len: int = _f(75, POS_INT)
    # flow
    flow_transforms: int = _f(5, NONNEG_INT)
    flow_hidden: tuple = _f((64, 64), "hidden")
    eps_softplus: float = _f(1e-3, POS)
    # leader bank
    W: int = _f(75, POS_INT)
    window_stride: int = _f(50, POS_INT)
    L_syn_cap: int = _f(10000, NONNEG_INT)
    time_scale_range: tuple = _f((0.9, 1.1), "range")
    scale_range: tuple = _f((0.9, 1.1), "range")
    vel_jitter: float = _f(0.2, NONNEG)
    acc_clip: float = _f(2.5, POS)
    jerk_clip: float = _f(5.0, POS)
    a_phys_max: float = _f(10.0, POS)
    j_max: float = _f(20.0, POS)
    eps_kin: float = _f(0.5, POS)
    envelope_percentiles: tuple = _f((1.0, 99.0), "percentiles")
    K_rho: int = _f(5, POS_INT)
    eps_rho: float = _f(1e-3, POS)
    # evaluation
    H: int = _f(50, POS_INT)
    S: int = _f(20, POS_INT)
    m: int = _f(20, POS_INT)
    eval_n_samples: int = _f(500, "n_samples")
    pi_level: float = _f(0.95, "level")
    eval_val_size: int = _f(200, POS_INT)
    # run
    seed: int = _f(0, NONNEG_INT)
    threads: int = _f(1, POS_INT)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        for f in fields(self):
            _validate(f.name, getattr(self, f.name), f.metadata.get("check"), type(f.default))
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.W != self.encoder_target_len:
            raise ConfigError("leader window length W must equal encoder_target_len "
                              "(simulated windows are encoded directly)")

    # -- derived component configs --------------------------------------
    @property
    def spec(self) -> ResidualSpec:
        return ResidualSpec(self.residual)

    def loop(self, variant: str = "full") -> LoopConfig:
        return LoopConfig(
            R=self.R, B0=self.samples_initial, samples_per_round=self.samples_per_round, B=self.B,
            buffer_capacity=self.train_buffer_size, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            min_rounds=self.min_rounds, patience=self.patience_round, min_delta=self.min_delta_round,
            lambda_schedule=self.lambda_schedule_base, alpha_schedule=self.alpha_schedule_base,
            K_candidates=self.K_candidates, pairs_per_theta=self.pairs_per_theta, gamma=self.gamma,
            tau_L=self.tau_L, tau_theta=self.tau_theta, M=self.M, eps_alpha=self.eps_alpha,
            obs_subset_size=self.eval_val_size, holdout_size=self.holdout_size,
            val_fraction=self.val_fraction, epoch_patience=self.epoch_patience, variant=variant)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.input_dim, self.d_model, self.layers, self.heads, self.local_window,
                             self.dropout, self.ffn_mult, self.encoder_target_len)

    def flow(self) -> FlowConfig:
        return FlowConfig(self.spec.dim, self.flow_transforms, tuple(self.flow_hidden), self.dropout,
                          self.eps_softplus, self.d_model)

    def bank(self) -> BankConfig:
        return BankConfig(self.W, self.window_stride, self.L_syn_cap, tuple(self.time_scale_range),
                          tuple(self.scale_range), self.vel_jitter, self.acc_clip, self.jerk_clip,
                          self.a_phys_max, self.j_max, self.eps_kin, tuple(self.envelope_percentiles), self.dt)

    def eval(self) -> EvalConfig:
        return EvalConfig(self.H, self.S, self.m, self.eval_n_samples, self.pi_level, self.encoder_target_len)

    # -- text format ------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
        return "\n".join(lines) + "\n"

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{no}: expected 'key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{source}:{no}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
            try:
                values[key] = json.loads(val)
            except json.JSONDecodeError:
                raise ConfigError(f"{source}:{no}: value for {key!r} is not valid JSON: {val}") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text(), str(path))

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _validate(name, v, check, default_type):
    def bad(msg):
        raise ConfigError(f"{name}: {msg} (got {v!r})")

    if default_type is int and (isinstance(v, bool) or not isinstance(v, int)):
        bad("expected an integer")
    if default_type is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        bad("expected a number")
    if check == POS_INT and v < 1:
        bad("must be >= 1")
    elif check == NONNEG_INT and v < 0:
        bad("must be >= 0")
    elif check == POS and not v > 0:
        bad("must be > 0")
    elif check == NONNEG and v < 0:
        bad("must be >= 0")
    elif check == OPEN_UNIT and not 0 < v < 1:
        bad("must lie in (0, 1)")
    elif check in ("dropout", "level") and not 0 <= v < 1:
        bad("must lie in [0, 1)")
    elif check == "M" and v < 2:
        bad("must be >= 2")
    elif check == "n_samples" and v < 2:
        bad("must be >= 2")
    elif check == "residual":
        try:
            ResidualKind(v)
        except ValueError:
            bad(f"expected one of {[k.value for k in ResidualKind]}")
    elif check == "ratios":
        if len(v) != 3 or min(v) < 0 or abs(sum(v) - 1) > 1e-9:
            bad("expected three non-negative ratios summing to 1")
    elif check == "schedule":
        if len(v) < 1 or any(not 0 <= x <= 1 for x in v):
            bad("expected a non-empty list of values in [0, 1]")
    elif check == "hidden":
        if len(v) < 1 or any(not isinstance(x, int) or x < 1 for x in v):
            bad("expected a non-empty list of positive integers")
    elif check == "range":
        if len(v) != 2 or not 0 < v[0] <= v[1]:
            bad("expected [lo, hi] with 0 < lo <= hi")
    elif check == "percentiles":
        if len(v) != 2 or not 0 <= v[0] < v[1] <= 100:
            bad("expected [lo, hi] with 0 <= lo < hi <= 100")
