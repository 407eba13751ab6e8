"""Local-global attention encoder: follower window (T x 3) -> context vector.

Each layer runs, on a shared pre-norm input, (i) multi-head self-attention
restricted to a centred band of half-width ``local_window`` with a learnable
per-head bias for every relative offset, and (ii) attention from a learnable
[CLS] token to all valid positions with a per-head bias on log-spaced
recency buckets.  Both are added residually, then a GELU feed-forward block
is applied to every token.  The context vector is the final (normed) [CLS]
state.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 3
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    local_window: int = 4
    dropout: float = 0.2
    ffn_mult: int = 4
    target_len: int = 75

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


class MCDropout(nn.Module):
    """Dropout with an explicit random source.

    ``mode`` is ``"off"`` (identity), ``"train"`` (fresh element-wise masks
    every call) or ``"mc"`` (one mask per feature, shared across the batch
    and positions and kept until :func:`new_realization`; one such mask set
    is one dropout realization of the network).
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)
        self.mode = "off"
        self.generator: torch.Generator | None = None
        self._mask: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "off" or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        if self.mode == "train":
            mask = torch.bernoulli(torch.full_like(x, keep), generator=self.generator)
            return x * mask / keep
        if self._mask is None or self._mask.shape[0] != x.shape[-1] or self._mask.dtype != x.dtype:
            self._mask = torch.bernoulli(torch.full((x.shape[-1],), keep, dtype=x.dtype),
                                         generator=self.generator) / keep
        return x * self._mask


def set_dropout(module: nn.Module, mode: str, generator: torch.Generator | None = None) -> None:
    if mode not in ("off", "train", "mc"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    for m in module.modules():
        if isinstance(m, MCDropout):
            m.mode, m.generator, m._mask = mode, generator, None


def new_realization(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, MCDropout):
            m._mask = None


@contextmanager
def dropout_mode(module: nn.Module, mode: str, generator: torch.Generator | None = None):
    set_dropout(module, mode, generator)
    try:
        yield module
    finally:
        set_dropout(module, "off")


def recency_bucket(offset: np.ndarray) -> np.ndarray:
    """Log-spaced bucket of a positive distance: 1, 2-3, 4-7, ... -> 1, 2, 3, ..."""
    return 1 + np.floor(np.log2(np.maximum(offset, 1))).astype(np.int64)


def local_band(T: int, w: int) -> torch.Tensor:
    t = torch.arange(T)
    return (t[None, :] - t[:, None]).abs() <= w


class LocalGlobalLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, H, w, T = cfg.d_model, cfg.heads, cfg.local_window, cfg.target_len
        self.heads, self.w = H, w
        self.norm1 = nn.LayerNorm(d)
        self.local_qkv = nn.Linear(d, 3 * d)
        self.local_out = nn.Linear(d, d)
        self.global_q = nn.Linear(d, d)
        self.global_kv = nn.Linear(d, 2 * d)
        self.global_out = nn.Linear(d, d)
        n_buckets = int(recency_bucket(np.array([T]))[0]) + 1
        self.local_bias = nn.Parameter(torch.zeros(H, 2 * w + 1))
        self.global_bias = nn.Parameter(torch.zeros(H, n_buckets))
        self.norm2 = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, cfg.ffn_mult * d)
        self.ffn_out = nn.Linear(cfg.ffn_mult * d, d)
        self.drop_local = MCDropout(cfg.dropout)
        self.drop_global = MCDropout(cfg.dropout)
        self.drop_ffn = MCDropout(cfg.dropout)
        self.drop_out = MCDropout(cfg.dropout)
        t = torch.arange(T)
        rel = (t[None, :] - t[:, None]).clamp(-w, w) + w
        self.register_buffer("rel_index", rel, persistent=False)
        self.register_buffer("band", local_band(T, w), persistent=False)
        # CLS sits after the last step: key tau has recency T - tau; CLS itself is bucket 0
        buckets = np.concatenate([[0], recency_bucket(T - np.arange(T))])
        self.register_buffer("bucket_index", torch.as_tensor(buckets), persistent=False)

    def local_logits(self, hz: torch.Tensor, valid: torch.Tensor):
        B, T, d = hz.shape
        H, dh = self.heads, d // self.heads
        q, k, v = self.local_qkv(hz).view(B, T, 3, H, dh).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh) + self.local_bias[:, self.rel_index]
        eye = torch.eye(T, dtype=torch.bool, device=hz.device)
        allowed = self.band[None] & (valid[:, None, :] | eye[None])
        return logits.masked_fill(~allowed[:, None], float("-inf")), v

    def forward(self, cls, z, valid, ablate_global: bool = False):
        B, T, d = z.shape
        H, dh = self.heads, d // self.heads
        h = self.norm1(torch.cat([cls, z], dim=1))
        hc, hz = h[:, :1], h[:, 1:]

        logits, v = self.local_logits(hz, valid)
        att = torch.softmax(logits, dim=-1) @ v
        z = z + self.drop_local(self.local_out(att.transpose(1, 2).reshape(B, T, d)))

        if not ablate_global:
            q = self.global_q(hc).view(B, 1, H, dh).transpose(1, 2)
            k, vv = self.global_kv(h).view(B, T + 1, 2, H, dh).permute(2, 0, 3, 1, 4)
            g = q @ k.transpose(-1, -2) / math.sqrt(dh) + self.global_bias[:, self.bucket_index][None, :, None]
            key_ok = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=z.device), valid], dim=1)
            g = g.masked_fill(~key_ok[:, None, None, :], float("-inf"))
            out = (torch.softmax(g, dim=-1) @ vv).transpose(1, 2).reshape(B, 1, d)
            cls = cls + self.drop_global(self.global_out(out))

        x = torch.cat([cls, z], dim=1)
        x = x + self.drop_out(self.ffn_out(self.drop_ffn(F.gelu(self.ffn_in(self.norm2(x))))))
        return x[:, :1], x[:, 1:]


class TrajectoryEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("in_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("in_std", torch.ones(cfg.input_dim))
        self.w_in = nn.Linear(cfg.input_dim, cfg.d_model, bias=False)
        self.cls = nn.Parameter(torch.zeros(1, 1, cfg.d_model))
        self.layers = nn.ModuleList(LocalGlobalLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def set_input_normalization(self, mean, std) -> None:
        self.in_mean.copy_(torch.as_tensor(mean, dtype=self.in_mean.dtype))
        self.in_std.copy_(torch.as_tensor(std, dtype=self.in_std.dtype).clamp_min(1e-6))

    def _run(self, x, valid, ablate_global):
        B, T, _ = x.shape
        if T != self.cfg.target_len:
            raise ShapeError(f"expected {self.cfg.target_len} steps, got {T}")
        if valid is None:
            valid = torch.ones(B, T, dtype=torch.bool, device=x.device)
        z = self.w_in((x - self.in_mean) / self.in_std)
        cls = self.cls.expand(B, 1, -1)
        for layer in self.layers:
            cls, z = layer(cls, z, valid, ablate_global)
        return cls, z

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None,
                ablate_global: bool = False) -> torch.Tensor:
        cls, _ = self._run(x, valid, ablate_global)
        return self.norm(cls[:, 0])

    def token_states(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        return self._run(x, valid, False)[1]


def pad_or_crop(x: np.ndarray, target_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit a (n, 3) window to ``target_len`` rows.

    Longer inputs keep their last ``target_len`` rows; shorter ones are
    left-padded with copies of the first row, and the returned mask is False
    on padded rows.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 1:
        raise ShapeError("empty window")
    if n >= target_len:
        return x[n - target_len:], np.ones(target_len, dtype=bool)
    pad = np.repeat(x[:1], target_len - n, axis=0)
    valid = np.concatenate([np.zeros(target_len - n, dtype=bool), np.ones(n, dtype=bool)])
    return np.concatenate([pad, x]), valid


def encode(encoder: TrajectoryEncoder, x, mode: str = "eval", generator: torch.Generator | None = None,
           valid=None) -> torch.Tensor:
    """Context vector(s) for one window (T, 3) or a batch (B, T, 3).

    ``mode``: ``"eval"`` (deterministic), ``"train"`` (element-wise dropout)
    or ``"mc_dropout"`` (one fresh dropout realization drawn from ``generator``).
    """
    param = next(encoder.parameters())
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = np.array(x)  # frozen hold-out arrays
    xt = torch.as_tensor(x, dtype=param.dtype)
    single = xt.dim() == 2
    if single:
        xt = xt[None]
    if xt.dim() != 3 or xt.shape[-1] != encoder.cfg.input_dim or xt.shape[1] != encoder.cfg.target_len:
        raise ShapeError(f"expected (..., {encoder.cfg.target_len}, {encoder.cfg.input_dim}), "
                         f"got {tuple(xt.shape)}")
    if not torch.isfinite(xt).all():
        raise DomainError("non-finite values in encoder input")
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool)
        if valid.dim() == 1:
            valid = valid[None].expand(xt.shape[0], -1)
    dmode = {"eval": "off", "train": "train", "mc_dropout": "mc"}[mode]
    with dropout_mode(encoder, dmode, generator):
        c = encoder(xt, valid)
    return c[0] if single else c
