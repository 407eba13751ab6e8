"""Conditional masked autoregressive flow over unconstrained parameters,
the softplus positivity transform, and the posterior model bundle."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import EncoderConfig, MCDropout, TrajectoryEncoder, dropout_mode, encode, new_realization
from .errors import DomainError, NumericalError, ShapeError
from .sim import ResidualSpec

BUNDLE_VERSION = 1
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 6
    num_transforms: int = 5
    hidden: tuple[int, ...] = (64, 64)
    dropout: float = 0.2
    eps_softplus: float = 1e-3
    context_dim: int = 64
    log_scale_clip: float = 7.0


# -- positivity transform ----------------------------------------------------

def _softplus(u):
    if isinstance(u, torch.Tensor):
        return u.clamp_min(0) + torch.log1p(torch.exp(-u.abs()))
    u = np.asarray(u, dtype=float)
    return np.maximum(u, 0) + np.log1p(np.exp(-np.abs(u)))


def to_physical(u, eps: float = 1e-3):
    """theta = softplus(u) + eps, elementwise."""
    return _softplus(u) + eps


def from_physical(theta, eps: float = 1e-3):
    """Inverse of :func:`to_physical`; every component must exceed ``eps``."""
    if isinstance(theta, torch.Tensor):
        y = theta - eps
        if (y <= 0).any():
            raise DomainError(f"parameter components must exceed eps={eps}")
        return y + torch.log(-torch.expm1(-y))
    y = np.asarray(theta, dtype=float) - eps
    if np.any(y <= 0):
        raise DomainError(f"parameter components must exceed eps={eps}")
    return y + np.log(-np.expm1(-y))


def log_sigmoid(u):
    """log of the logistic function, i.e. the per-component log Jacobian of softplus."""
    if isinstance(u, torch.Tensor):
        return -_softplus(-u)
    return -_softplus(-np.asarray(u, dtype=float))


def transform_logdet(u):
    return log_sigmoid(u).sum(-1)


# -- MADE --------------------------------------------------------------------

class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


def made_degrees(D: int, hidden: tuple[int, ...]) -> list[torch.Tensor]:
    """Autoregressive degrees: inputs 1..D, hidden units cycle through 1..D-1."""
    degs = [torch.arange(1, D + 1)]
    for h in hidden:
        if D > 1:
            degs.append(torch.arange(h) % (D - 1) + 1)
        else:
            degs.append(torch.zeros(h, dtype=torch.long))
    return degs


class ConditionalMADE(nn.Module):
    """Affine autoregressive transform z_i = (x_i - m_i) * exp(-a_i), with
    (m_i, a_i) functions of x_{<i} and the context."""

    def __init__(self, D: int, hidden: tuple[int, ...], context_dim: int, dropout: float, clip: float):
        super().__init__()
        self.D, self.clip = D, clip
        degs = made_degrees(D, hidden)
        sizes = (D,) + tuple(hidden)
        self.hidden = nn.ModuleList(
            MaskedLinear(sizes[i], sizes[i + 1], (degs[i + 1][:, None] >= degs[i][None, :]))
            for i in range(len(hidden)))
        self.context = nn.Linear(context_dim, hidden[0], bias=False)
        out_deg = torch.cat([degs[0], degs[0]])
        self.out = MaskedLinear(hidden[-1], 2 * D, (out_deg[:, None] > degs[-1][None, :]))
        self.drops = nn.ModuleList(MCDropout(dropout) for _ in hidden)
        nn.init.normal_(self.out.weight, std=1e-2)
        nn.init.zeros_(self.out.bias)

    def shift_and_log_scale(self, x, c):
        h = self.hidden[0](x) + self.context(c)
        h = self.drops[0](F.gelu(h))
        for lin, drop in zip(self.hidden[1:], self.drops[1:]):
            h = drop(F.gelu(lin(h)))
        m, a = self.out(h).chunk(2, dim=-1)
        return m, a.clamp(-self.clip, self.clip)

    def forward(self, x, c):
        m, a = self.shift_and_log_scale(x, c)
        return (x - m) * torch.exp(-a), -a.sum(-1)

    def inverse(self, z, c):
        x = torch.zeros_like(z)
        for i in range(self.D):
            m, a = self.shift_and_log_scale(x, c)
            x = x.clone()
            x[..., i] = z[..., i] * torch.exp(a[..., i]) + m[..., i]
        return x


class ConditionalMAF(nn.Module):
    """Fixed affine standardisation of u followed by K MADE layers; the
    variable order is reversed before every odd-numbered layer."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("u_mean", torch.zeros(cfg.dim))
        self.register_buffer("u_std", torch.ones(cfg.dim))
        self.transforms = nn.ModuleList(
            ConditionalMADE(cfg.dim, cfg.hidden, cfg.context_dim, cfg.dropout, cfg.log_scale_clip)
            for _ in range(cfg.num_transforms))

    def set_standardization(self, mean, std) -> None:
        self.u_mean.copy_(torch.as_tensor(mean, dtype=self.u_mean.dtype))
        self.u_std.copy_(torch.as_tensor(std, dtype=self.u_std.dtype).clamp_min(1e-6))

    def forward(self, u, c):
        """u -> z with the summed log |det dz/du|."""
        x = (u - self.u_mean) / self.u_std
        logdet = -torch.log(self.u_std).sum().expand(u.shape[:-1])
        for k, t in enumerate(self.transforms):
            if k % 2 == 1:
                x = x.flip(-1)
            x, ld = t(x, c)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, z, c):
        x = z
        for k in reversed(range(len(self.transforms))):
            x = self.transforms[k].inverse(x, c)
            if k % 2 == 1:
                x = x.flip(-1)
        return x * self.u_std + self.u_mean

    def log_prob(self, u, c):
        z, logdet = self(u, c)
        lp = -0.5 * (z ** 2).sum(-1) - 0.5 * self.cfg.dim * LOG_2PI + logdet
        return lp


# -- posterior model ---------------------------------------------------------

class PosteriorModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig = EncoderConfig(), flow_cfg: FlowConfig | None = None,
                 residual: ResidualSpec = ResidualSpec()):
        super().__init__()
        if flow_cfg is None:
            flow_cfg = FlowConfig(dim=residual.dim, context_dim=encoder_cfg.d_model,
                                  dropout=encoder_cfg.dropout)
        if flow_cfg.dim != residual.dim or flow_cfg.context_dim != encoder_cfg.d_model:
            raise ShapeError("flow dimensions do not match residual spec / encoder width")
        self.encoder_cfg, self.flow_cfg, self.residual = encoder_cfg, flow_cfg, residual
        self.encoder = TrajectoryEncoder(encoder_cfg)
        self.flow = ConditionalMAF(flow_cfg)
        self.provenance: dict = {}

    @property
    def eps(self) -> float:
        return self.flow_cfg.eps_softplus

    @property
    def dtype(self) -> torch.dtype:
        return self.flow.u_mean.dtype

    def tensor(self, a) -> torch.Tensor:
        if isinstance(a, np.ndarray) and not a.flags.writeable:
            a = a.copy()
        return torch.as_tensor(a, dtype=self.dtype)

    def context(self, x, mode: str = "eval", generator=None, valid=None) -> torch.Tensor:
        return encode(self.encoder, x, mode, generator, valid)

    def log_prob_u(self, u, c) -> torch.Tensor:
        lp = self.flow.log_prob(self.tensor(u), self.tensor(c))
        if not torch.isfinite(lp).all():
            raise NumericalError("non-finite flow log density")
        return lp

    def log_prob_theta(self, theta, c) -> torch.Tensor:
        u = from_physical(self.tensor(theta), self.eps)
        return self.log_prob_u(u, c) - transform_logdet(u)

    @torch.no_grad()
    def sample_u(self, c, n: int, generator: torch.Generator | None = None, mode: str = "eval") -> torch.Tensor:
        """``n`` draws per context: c (d,) -> (n, D); c (B, d) -> (B, n, D)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        c = self.tensor(c)
        single = c.dim() == 1
        C = c[None] if single else c
        z = torch.randn(C.shape[0], n, self.flow_cfg.dim, generator=generator, dtype=self.dtype)
        cc = C[:, None, :].expand(-1, n, -1)
        with dropout_mode(self.flow, "mc" if mode == "mc_dropout" else "off", generator):
            u = self.flow.inverse(z.reshape(-1, self.flow_cfg.dim), cc.reshape(-1, C.shape[1]))
        u = u.reshape(C.shape[0], n, -1)
        return u[0] if single else u

    def sample_theta(self, c, n: int, generator: torch.Generator | None = None, mode: str = "eval") -> np.ndarray:
        return to_physical(self.sample_u(c, n, generator, mode), self.eps).cpu().numpy().astype(float)

    @torch.no_grad()
    def posterior_samples(self, x, n: int, generator: torch.Generator | None = None,
                          batch: int = 256) -> np.ndarray:
        """theta draws for a batch of windows (B, T, 3) -> (B, n, D), eval mode."""
        out = []
        for i in range(0, len(x), batch):
            c = self.context(x[i:i + batch])
            out.append(self.sample_theta(c, n, generator))
        return np.concatenate(out, axis=0)

    def nll_loss(self, theta, x, valid=None) -> torch.Tensor:
        """-mean log q(theta | f(x)) under the current dropout mode of the modules."""
        theta = self.tensor(theta)
        c = self.encoder(self.tensor(x), valid)
        u = from_physical(theta, self.eps)
        lp = self.flow.log_prob(u, c) - transform_logdet(u)
        loss = -lp.mean()
        if not torch.isfinite(loss):
            bad = (~torch.isfinite(lp)).nonzero().flatten()[:5].tolist()
            raise NumericalError(f"non-finite NLL; batch size {len(lp)}, offending rows {bad}, "
                                 f"theta range [{theta.min().item():.3g}, {theta.max().item():.3g}]")
        return loss

    @torch.no_grad()
    def mean_nll(self, theta, x, batch: int = 512) -> float:
        total = 0.0
        for i in range(0, len(theta), batch):
            total += float(self.nll_loss(theta[i:i + batch], x[i:i + batch])) * len(theta[i:i + batch])
        return total / len(theta)

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        state = {
            "version": BUNDLE_VERSION,
            "encoder_cfg": asdict(self.encoder_cfg),
            "flow_cfg": asdict(self.flow_cfg),
            "residual": self.residual.kind.value,
            "dtype": str(self.dtype).replace("torch.", ""),
            "state_dict": self.state_dict(),
            "provenance": provenance if provenance is not None else self.provenance,
        }
        torch.save(state, path)

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorModel":
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state.get("version") != BUNDLE_VERSION:
            raise ShapeError(f"{path}: unsupported bundle version {state.get('version')}")
        fc = dict(state["flow_cfg"])
        fc["hidden"] = tuple(fc["hidden"])
        model = cls(EncoderConfig(**state["encoder_cfg"]), FlowConfig(**fc), ResidualSpec(state["residual"]))
        model.to(getattr(torch, state.get("dtype", "float32")))
        model.load_state_dict(state["state_dict"])
        model.provenance = state.get("provenance", {})
        model.eval()
        return model


def mc_dropout_alpha(model: PosteriorModel, theta_candidates, obs_subset, M: int = 20,
                     eps_alpha: float = 1e-6, generator: torch.Generator | None = None,
                     standardize: bool = True, chunk: int = 1 << 16) -> np.ndarray:
    """Epistemic score per candidate theta from ``M`` dropout realizations.

    For every (theta, observed window) pair the log density under each
    realization is collected; alpha = mean + log(var + eps_alpha), averaged
    over the observed windows and (optionally) z-scored across candidates.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    theta = model.tensor(theta_candidates)
    if len(obs_subset) == 0:
        raise ValueError("observed subset is empty")
    N, K = theta.shape[0], len(obs_subset)
    u = from_physical(theta, model.eps)
    jac = transform_logdet(u)
    ll = torch.empty(M, N, K, dtype=model.dtype)
    with torch.no_grad(), dropout_mode(model, "mc", generator):
        for m in range(M):
            new_realization(model)
            c = model.encoder(model.tensor(obs_subset))
            uu = u[:, None, :].expand(N, K, -1).reshape(-1, u.shape[1])
            cc = c[None, :, :].expand(N, K, -1).reshape(-1, c.shape[1])
            flat = torch.empty(N * K, dtype=model.dtype)
            for i in range(0, N * K, chunk):
                flat[i:i + chunk] = model.flow.log_prob(uu[i:i + chunk], cc[i:i + chunk])
            ll[m] = flat.view(N, K) - jac[:, None]
    mu = ll.mean(0)
    var = ll.var(0, unbiased=False)
    alpha = (mu + torch.log(var + eps_alpha)).mean(1).numpy().astype(float)
    if not standardize:
        return alpha
    sd = alpha.std()
    return (alpha - alpha.mean()) / sd if sd > 0 else np.zeros_like(alpha)
