import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from asbc.encoder import EncoderConfig
from asbc.errors import DomainError, NumericalError, ShapeError
from asbc.flow import (ConditionalMAF, FlowConfig, PosteriorModel, from_physical, log_sigmoid, made_degrees,
                       mc_dropout_alpha, to_physical, transform_logdet)
from asbc.sim import GAUSSIAN, MATERN, THETA_REC

ENC = EncoderConfig(d_model=8, layers=1, heads=2, local_window=2, dropout=0.2, ffn_mult=2, target_len=12)


def maf(D, K=3, hidden=(16, 16), ctx=4, dropout=0.0, seed=0, gain=40.0):
    """Random conditional MAF in float64 with non-trivial shifts and scales."""
    torch.manual_seed(seed)
    f = ConditionalMAF(FlowConfig(D, K, hidden, dropout, 1e-3, ctx)).double()
    with torch.no_grad():
        for t in f.transforms:
            t.out.weight.mul_(gain)
            t.out.bias.normal_(0, 0.2)
    return f


def model(spec=GAUSSIAN, K=2, dropout=0.2, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    enc = EncoderConfig(**{**ENC.__dict__, "dropout": dropout})
    m = PosteriorModel(enc, FlowConfig(spec.dim, K, (16,), dropout, 1e-3, enc.d_model), spec).to(dtype)
    with torch.no_grad():
        for t in m.flow.transforms:
            t.out.weight.mul_(20)
    return m


def windows(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 12, 3))


def thetas(n, seed=0, D=6):
    rng = np.random.default_rng(seed)
    base = np.r_[THETA_REC, 0.37, 3.0][:D]
    return base * np.exp(rng.normal(0, 0.2, (n, D)))


# -- positivity transform ----------------------------------------------------

def test_softplus_origin():
    assert to_physical(0.0) == pytest.approx(math.log(2) + 1e-3, abs=1e-15)
    assert to_physical(0.0) == pytest.approx(0.6941471805599453, abs=1e-15)


def test_from_physical_round_trip():
    th = np.r_[1e-3 + np.logspace(-6, 0, 500), np.linspace(1, 50, 500)]
    np.testing.assert_allclose(to_physical(from_physical(th)), th, rtol=0, atol=1e-9)


def test_from_physical_matches_naive_formula():
    th = np.linspace(0.01, 30, 200)
    naive = np.array([math.log(math.expm1(t - 1e-3)) for t in th])
    np.testing.assert_allclose(from_physical(th), naive, rtol=1e-12, atol=1e-12)


def test_from_physical_domain():
    with pytest.raises(DomainError):
        from_physical(np.array([1.0, 1e-3]))
    with pytest.raises(DomainError):
        from_physical(torch.tensor([0.5, -1.0]))


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=7))
def test_transform_jacobian_fd(u):
    u = np.array(u)
    h = 1e-6
    # eps shifts the value only; dropping it avoids cancellation for very negative u
    fd = (to_physical(u + h, 0.0) - to_physical(u - h, 0.0)) / (2 * h)
    np.testing.assert_allclose(np.exp(log_sigmoid(u)), fd, rtol=1e-6, atol=1e-12)
    # relative error in fd is absolute error in its log
    assert transform_logdet(u) == pytest.approx(np.log(fd).sum(), abs=1e-6 * len(u))


def test_torch_numpy_transform_agree():
    u = np.linspace(-30, 30, 101)
    np.testing.assert_allclose(to_physical(torch.as_tensor(u)).numpy(), to_physical(u), rtol=1e-15)
    np.testing.assert_allclose(log_sigmoid(torch.as_tensor(u)).numpy(), log_sigmoid(u), rtol=1e-15)


# -- flow density ------------------------------------------------------------

def test_identity_flow_value():
    f = ConditionalMAF(FlowConfig(6, 0, (8,), 0.0, 1e-3, 4)).double()
    lp = f.log_prob(torch.zeros(1, 6, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64))
    assert lp.item() == pytest.approx(-3 * math.log(2 * math.pi), abs=1e-12)
    assert lp.item() == pytest.approx(-5.513631199228036, abs=1e-12)


def test_made_autoregressive_jacobian():
    f = maf(4, K=1)
    t = f.transforms[0]
    x = torch.randn(4, dtype=torch.float64)
    c = torch.randn(4, dtype=torch.float64)
    J = torch.autograd.functional.jacobian(lambda v: t(v, c)[0], x)
    assert torch.allclose(J, torch.tril(J))
    _, a = t.shift_and_log_scale(x, c)
    assert t(x, c)[1].item() == pytest.approx(-a.sum().item(), abs=1e-12)
    assert torch.logdet(J).item() == pytest.approx(t(x, c)[1].item(), abs=1e-10)


def test_full_flow_logdet_matches_autograd():
    f = maf(3, K=4)
    f.set_standardization([0.5, -1.0, 2.0], [2.0, 0.5, 1.5])
    u = torch.randn(3, dtype=torch.float64)
    c = torch.randn(4, dtype=torch.float64)
    J = torch.autograd.functional.jacobian(lambda v: f(v, c)[0], u)
    assert torch.linalg.slogdet(J)[1].item() == pytest.approx(f(u, c)[1].item(), abs=1e-10)


def test_made_degrees_one_dim():
    degs = made_degrees(1, (5,))
    assert (degs[1] == 0).all()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_normalization_1d(seed):
    f = maf(1, seed=seed)
    c = torch.randn(1, 4, dtype=torch.float64)
    u = torch.linspace(-10, 10, 20001, dtype=torch.float64)[:, None]
    with torch.no_grad():
        p = f.log_prob(u, c.expand(len(u), -1)).exp().numpy()
    assert integrate.trapezoid(p, u[:, 0].numpy()) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("seed", [0, 1])
def test_normalization_2d(seed):
    f = maf(2, seed=seed)
    c = torch.randn(1, 4, dtype=torch.float64)
    g = torch.linspace(-10, 10, 801, dtype=torch.float64)
    U = torch.cartesian_prod(g, g)
    with torch.no_grad():
        p = f.log_prob(U, c.expand(len(U), -1)).exp().numpy().reshape(801, 801)
    gx = g.numpy()
    assert integrate.trapezoid(integrate.trapezoid(p, gx, axis=1), gx) == pytest.approx(1.0, abs=1e-3)


def test_round_trip_full_flow():
    torch.manual_seed(4)
    f = ConditionalMAF(FlowConfig(6, 5, (64, 64), 0.2, 1e-3, 16))
    with torch.no_grad():
        for t in f.transforms:
            t.out.weight.mul_(10)
    f.set_standardization(torch.randn(6), torch.rand(6) + 0.5)
    z = torch.randn(1000, 6)
    c = torch.randn(1000, 16)
    with torch.no_grad():
        back, _ = f(f.inverse(z, c), c)
    assert (back - z).abs().max().item() < 1e-5


def test_sampling_kl_against_density():
    f = maf(2, seed=3)
    c = torch.randn(4, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        z = torch.randn(100_000, 2, generator=gen, dtype=torch.float64)
        u = f.inverse(z, c.expand(len(z), -1)).numpy()
    lo, hi = np.percentile(u, 0.5, axis=0), np.percentile(u, 99.5, axis=0)
    edges = [np.linspace(lo[i], hi[i], 31) for i in range(2)]
    counts, _, _ = np.histogram2d(u[:, 0], u[:, 1], bins=edges)
    cx, cy = [(e[:-1] + e[1:]) / 2 for e in edges]
    grid = torch.as_tensor(np.stack(np.meshgrid(cx, cy, indexing="ij"), -1).reshape(-1, 2))
    with torch.no_grad():
        dens = f.log_prob(grid, c.expand(len(grid), -1)).exp().numpy().reshape(30, 30)
    p = counts / counts.sum()
    q = dens / dens.sum()
    m = p > 0
    assert np.sum(p[m] * np.log(p[m] / q[m])) < 0.05


def test_identity_flow_samples_standard_normal():
    m = model(K=0)
    c = torch.zeros(8, dtype=torch.float64)
    u = m.sample_u(c, 4000, torch.Generator().manual_seed(0))
    assert (u.mean(0).abs() < 3 / math.sqrt(4000)).all()


# -- posterior model --------------------------------------------------------

def test_change_of_variables_identity():
    m = model()
    c = m.context(windows(5))
    th = m.sample_theta(c, 7, torch.Generator().manual_seed(1)).reshape(-1, 6)
    cc = c.repeat_interleave(7, 0)
    u = from_physical(m.tensor(th), m.eps)
    with torch.no_grad():
        lhs = m.log_prob_theta(th, cc) + transform_logdet(u)
        rhs = m.log_prob_u(u, cc)
    assert torch.isfinite(lhs).all()
    assert torch.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_theta_density_quadrature_1d():
    f = maf(1, seed=5)
    c = torch.randn(1, 4, dtype=torch.float64)
    y = np.logspace(-14, math.log10(50 - 1e-3), 200_001)
    th = torch.as_tensor(1e-3 + y)[:, None]
    u = from_physical(th, 1e-3)
    with torch.no_grad():
        dens = (f.log_prob(u, c.expand(len(u), -1)) - transform_logdet(u)).exp().numpy()
    assert integrate.trapezoid(dens, th[:, 0].numpy()) == pytest.approx(1.0, abs=1e-3)


def test_theta_argmax_via_u_grid():
    f = maf(1, seed=6)
    c = torch.randn(1, 4, dtype=torch.float64)
    u = torch.linspace(-6, 6, 120_001, dtype=torch.float64)[:, None]
    with torch.no_grad():
        score_u = f.log_prob(u, c.expand(len(u), -1)) - transform_logdet(u)
        th = to_physical(u, 1e-3)
        dens_th = f.log_prob(from_physical(th, 1e-3), c.expand(len(u), -1)) - transform_logdet(u)
    u_star = u[score_u.argmax()].item()
    th_star = th[dens_th.argmax()].item()
    assert to_physical(u_star) == pytest.approx(th_star, abs=1e-3)


def test_sample_shapes_and_determinism():
    m = model()
    c = m.context(windows(3))
    a = m.sample_u(c, 5, torch.Generator().manual_seed(9))
    b = m.sample_u(c, 5, torch.Generator().manual_seed(9))
    assert a.shape == (3, 5, 6) and torch.equal(a, b)
    assert m.sample_u(c[0], 4).shape == (4, 6)
    assert m.posterior_samples(windows(3), 10, torch.Generator().manual_seed(0)).shape == (3, 10, 6)
    with pytest.raises(ValueError):
        m.sample_u(c, 0)


def test_log_prob_nonfinite():
    m = model()
    c = m.context(windows(1))
    with pytest.raises(NumericalError):
        m.log_prob_u(torch.full((1, 6), float("nan"), dtype=torch.float64), c)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        PosteriorModel(ENC, FlowConfig(6, 2, (8,), 0.2, 1e-3, ENC.d_model), MATERN)


# -- MC-dropout alpha ---------------------------------------------------------

def test_alpha_zero_variance():
    m = model(dropout=0.0)
    th, obs = thetas(6), windows(4)
    raw = mc_dropout_alpha(m, th, obs, M=3, eps_alpha=1e-6, standardize=False)
    with torch.no_grad():
        c = m.context(obs)
        ll = torch.stack([m.log_prob_theta(np.repeat(t[None], 4, 0), c) for t in th]).numpy()
    np.testing.assert_allclose(raw, ll.mean(1) + math.log(1e-6), rtol=1e-10)


def test_alpha_standardized():
    m = model()
    a = mc_dropout_alpha(m, thetas(40), windows(3), M=5, generator=torch.Generator().manual_seed(0))
    assert a.mean() == pytest.approx(0.0, abs=1e-12)
    assert a.std() == pytest.approx(1.0, rel=1e-12)


def test_alpha_reproducible():
    m = model()
    th, obs = thetas(10), windows(3)
    a = mc_dropout_alpha(m, th, obs, M=4, generator=torch.Generator().manual_seed(3))
    b = mc_dropout_alpha(m, th, obs, M=4, generator=torch.Generator().manual_seed(3))
    np.testing.assert_array_equal(a, b)


def test_alpha_needs_two_passes():
    with pytest.raises(ValueError):
        mc_dropout_alpha(model(), thetas(3), windows(2), M=1)


# -- loss --------------------------------------------------------------------

def test_nll_gradient_fd():
    m = model(dropout=0.0, seed=2)
    th, x = thetas(4, seed=1), windows(4, seed=1)
    u = from_physical(th)
    # keep the loss O(10) so central differences are not swamped by roundoff
    m.flow.set_standardization(u.mean(0), u.std(0))
    m.zero_grad()
    m.nll_loss(th, x).backward()
    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for p in m.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = m.nll_loss(th, x).item()
                flat[i] = old - h
                dn = m.nll_loss(th, x).item()
                flat[i] = old
                g = grad[i].item()
                worst = max(worst, abs((up - dn) / (2 * h) - g) / max(abs(g), 1e-5))
    assert worst < 1e-4


def test_nll_duplicate_batch():
    m = model()
    th, x = thetas(5), windows(5)
    one = m.nll_loss(th, x).item()
    two = m.nll_loss(np.concatenate([th, th]), np.concatenate([x, x])).item()
    assert two == pytest.approx(one, rel=1e-13)


def test_nll_descends():
    m = model(dropout=0.0, dtype=torch.float32)
    th, x = thetas(32, seed=4), windows(32, seed=4)
    opt = torch.optim.Adam(m.parameters(), lr=3e-3)
    first = None
    for _ in range(50):
        opt.zero_grad()
        loss = m.nll_loss(th, x)
        first = loss.item() if first is None else first
        loss.backward()
        opt.step()
    assert m.nll_loss(th, x).item() < first - 1.0


def test_nll_nonfinite_diagnostics():
    m = model()
    th = thetas(3)
    x = windows(3)
    with torch.no_grad():
        m.flow.u_std.fill_(1e-300)
    with pytest.raises(NumericalError, match="batch size 3"):
        m.nll_loss(th, x)


# -- bundle ------------------------------------------------------------------

def test_bundle_round_trip(tmp_path):
    m = model(MATERN)
    m.flow.set_standardization(np.arange(7) * 0.1, np.ones(7) * 2)
    m.save(tmp_path / "m.pt", {"round": 3, "seed": 11})
    back = PosteriorModel.load(tmp_path / "m.pt")
    assert back.provenance == {"round": 3, "seed": 11}
    assert back.residual == MATERN and back.dtype == torch.float64
    x = windows(2)
    th = thetas(2, D=7)
    with torch.no_grad():
        assert torch.equal(m.log_prob_theta(th, m.context(x)), back.log_prob_theta(th, back.context(x)))
    a = m.posterior_samples(x, 4, torch.Generator().manual_seed(0))
    b = back.posterior_samples(x, 4, torch.Generator().manual_seed(0))
    np.testing.assert_array_equal(a, b)


def test_bundle_version(tmp_path):
    m = model()
    m.save(tmp_path / "m.pt")
    state = torch.load(tmp_path / "m.pt", weights_only=False)
    state["version"] = 99
    torch.save(state, tmp_path / "m.pt")
    with pytest.raises(ShapeError):
        PosteriorModel.load(tmp_path / "m.pt")
