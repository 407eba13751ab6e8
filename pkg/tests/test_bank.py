import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from asbc.bank import (BankConfig, LeaderBank, Rejected, augment, build_real_bank, compute_envelope, features,
                       make_window, passes_filters, representativeness, sample_round_bank, schedule_value)
from asbc.data import Segment
from asbc.errors import ConfigError

CFG = BankConfig()


def leader_segment(v, fid=1, lid=2, dt=0.2):
    v = np.asarray(v, dtype=float)
    n = len(v)
    states = np.column_stack([np.full(n, 30.0), v, np.zeros(n)])
    return Segment(fid, lid, dt, states, np.column_stack([v, np.zeros(n)]))


def wavy(n=75, base=20.0, seed=0):
    t = np.arange(n) * 0.2
    ph = np.random.default_rng(seed).uniform(0, 6)
    return base + 1.5 * np.sin(0.3 * t + ph)


# -- real bank -------------------------------------------------------------

def test_real_bank_offsets():
    v = np.arange(175, dtype=float) * 0.01 + 10
    ws = build_real_bank([leader_segment(v)], CFG)
    assert len(ws) == 3
    assert [w.v[0] for w in ws] == pytest.approx([10.0, 10.5, 11.0])
    assert all(len(w) == 75 and w.source == "real" and w.origin_id == 2 for w in ws)


def test_short_segment_no_windows():
    assert build_real_bank([leader_segment(np.full(74, 10.0))], CFG) == []


def test_constant_leader_zero_accel():
    (w,) = build_real_bank([leader_segment(np.full(75, 12.0))], CFG)
    assert not w.a.any()


# -- augmentation -----------------------------------------------------------

def test_rescale_identity(rng):
    w = make_window(wavy(), 0.2)
    out = augment(w, "rescale", CFG, rng, kappa=1.0)
    np.testing.assert_array_equal(out.v, w.v)


def test_perturb_zero_amplitude(rng):
    w = make_window(wavy(), 0.2)
    out = augment(w, "perturb", CFG, rng, amplitude=0.0)
    np.testing.assert_array_equal(out.v, w.v)
    assert out.source == "synthetic"


def test_rescale_constant_speed(rng):
    w = make_window(np.full(75, 30.0), 0.2)
    out = augment(w, "rescale", CFG, rng, kappa=1.1)
    assert not isinstance(out, Rejected)
    np.testing.assert_allclose(out.v, 33.0)
    assert not out.a.any()


def test_perturb_amplitude_bound(rng):
    w = make_window(wavy(), 0.2)
    out = augment(w, "perturb", CFG, rng)
    if not isinstance(out, Rejected):
        assert np.abs(out.v - w.v).max() <= CFG.vel_jitter + 1e-12


def test_timewarp_endpoints_and_monotone(rng):
    v = np.linspace(10, 20, 75)
    out = augment(make_window(v, 0.2), "timewarp", CFG, rng, factors=(0.9, 1.1, 1.0))
    assert not isinstance(out, Rejected)
    assert out.v[0] == pytest.approx(10) and out.v[-1] == pytest.approx(20)
    assert (np.diff(out.v) >= 0).all()


def test_augment_rejects_synthetic_source(rng):
    w = make_window(wavy(), 0.2, source="synthetic")
    with pytest.raises(ValueError):
        augment(w, "rescale", CFG, rng)


def test_augment_keeps_init_consistent(rng):
    w = make_window(wavy(), 0.2, init=np.array([30.0, 19.0, -1.0]))
    out = augment(w, "rescale", CFG, rng, kappa=1.05)
    assert out.init[2] == pytest.approx(out.init[1] - out.v[0])


@given(st.sampled_from(["perturb", "rescale", "timewarp"]), st.integers(0, 10 ** 6))
def test_augmentation_preserves_length(kind, seed):
    w = make_window(wavy(seed=seed % 7), 0.2)
    out = augment(w, kind, CFG, np.random.default_rng(seed))
    if not isinstance(out, Rejected):
        assert len(out.v) == len(out.a) == CFG.W


# -- filters ---------------------------------------------------------------

def test_filters_accept_real_window():
    ok, bad = passes_filters(make_window(wavy(), 0.2), CFG, None)
    assert ok and bad == []


def test_filter_negative_speed():
    v = np.full(75, 5.0)
    v[40] = -0.1
    ok, bad = passes_filters(make_window(v, 0.2), CFG, None)
    assert not ok and "non-negativity" in bad


def test_filter_acceleration_bound():
    v = np.r_[np.full(40, 10.0), np.full(35, 13.0)]
    w = make_window(v, 0.2)
    assert w.a.max() == pytest.approx(15.0)
    ok, bad = passes_filters(w, CFG, None)
    assert not ok and "acceleration" in bad


def test_filter_envelope():
    real = [make_window(wavy(seed=s), 0.2) for s in range(10)]
    env = compute_envelope(real, CFG)
    ok, bad = passes_filters(make_window(np.full(75, 40.0), 0.2), CFG, env)
    assert not ok and bad == ["envelope"]


def test_bank_synthetic_pool_passes_filters(small_segments):
    cfg = BankConfig(syn_cap=300)
    bank = LeaderBank.from_segments(small_segments, cfg, np.random.default_rng(0))
    assert len(bank.syn) > 0
    for w in bank.syn:
        assert w.source == "synthetic" and len(w) == cfg.W
        assert passes_filters(w, cfg, bank.envelope)[0]


# -- features --------------------------------------------------------------

def test_features_constant():
    np.testing.assert_array_equal(features(make_window(np.full(75, 30.0), 0.2)), [30, 0, 30, 30, 0, 0, 0, 0])


def test_features_linear():
    v = np.linspace(20, 25, 75)
    f = features(make_window(v, 0.2))
    assert f[0] == pytest.approx(22.5)
    assert f[2] == 20 and f[3] == 25
    assert f[7] == pytest.approx(5 / 74)
    # arithmetic sequence: std = step * sqrt((n^2 - 1) / 12)
    assert f[1] == pytest.approx(5 / 74 * np.sqrt((75 ** 2 - 1) / 12))


def test_features_deterministic():
    w = make_window(wavy(), 0.2)
    np.testing.assert_array_equal(features(w), features(w))


# -- representativeness ------------------------------------------------------

def test_rho_duplicates():
    bank = np.tile([1.0, 2.0], (5, 1))
    assert representativeness([1.0, 2.0], bank, K=5)[0] == pytest.approx(1000.0)


def test_rho_toy():
    bank = np.array([[0.0], [1.0], [2.0], [10.0]])
    assert representativeness(bank[:1], bank, K=2, self_index=[0])[0] == pytest.approx(1 / (1e-3 + 1.5))


def test_rho_isolated():
    bank = np.random.default_rng(0).standard_normal((20, 3))
    assert representativeness(np.full(3, 1e6), bank, K=5)[0] < 1e-5


def test_rho_bank_too_small():
    with pytest.raises(ConfigError):
        representativeness(np.zeros(2), np.zeros((3, 2)), K=5)


@given(hnp.arrays(float, (12, 3), elements=st.floats(-50, 50)), hnp.arrays(float, (4, 3), elements=st.floats(-50, 50)),
       st.integers(1, 6))
def test_rho_duplicated_bank(bank, query, K):
    # every neighbour appears twice, so the 2K nearest of the doubled bank
    # are the K nearest of the original, each counted twice
    once = representativeness(query, bank, K)
    twice = representativeness(query, np.concatenate([bank, bank]), 2 * K)
    np.testing.assert_allclose(twice, once, rtol=1e-12)


# -- mixture ---------------------------------------------------------------

def _pools():
    real = [make_window(np.full(75, 10.0), 0.2)]
    syn = [make_window(np.full(75, 11.0), 0.2, "synthetic")]
    return real, syn


def test_mixture_endpoints(rng):
    real, syn = _pools()
    assert all(w.source == "real" for w in sample_round_bank(real, syn, 0.0, 500, rng))
    assert all(w.source == "synthetic" for w in sample_round_bank(real, syn, 1.0, 500, rng))


def test_mixture_fraction():
    real, syn = _pools()
    out = sample_round_bank(real, syn, 0.3, 100_000, np.random.default_rng(0))
    frac = np.mean([w.source == "synthetic" for w in out])
    assert abs(frac - 0.3) <= 0.01


def test_mixture_needs_synthetic(rng):
    real, _ = _pools()
    with pytest.raises(ValueError):
        sample_round_bank(real, [], 0.2, 3, rng)


def test_schedule_extension():
    sched = (0.0, 0.1, 0.2, 0.3)
    assert [schedule_value(sched, r, "alpha") for r in range(4)] == list(sched)
    assert schedule_value(sched, 4, "alpha") == pytest.approx(0.4)
    assert schedule_value(sched, 9, "alpha") == 0.5
    assert schedule_value((1.0, 0.5, 0.0), 7, "lambda") == 0.0


# -- persistence -----------------------------------------------------------

def test_bank_save_load(tmp_path, small_segments):
    bank = LeaderBank.from_segments(small_segments, BankConfig(syn_cap=50), np.random.default_rng(1))
    bank.save(tmp_path / "bank.npz")
    back = LeaderBank.load(tmp_path / "bank.npz")
    assert back.cfg == bank.cfg and back.envelope == bank.envelope
    assert len(back.real) == len(bank.real) and len(back.syn) == len(bank.syn)
    np.testing.assert_array_equal(back.rho_real, bank.rho_real)
    np.testing.assert_array_equal(back.rho_syn, bank.rho_syn)
    np.testing.assert_array_equal(back.real[0].init, bank.real[0].init)
