import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from asbc.errors import ConfigError, ShapeError
from asbc.evaluation import (EvalConfig, ablation_table, config_hash, energy_score, error_distribution_data,
                             eval_layout, evaluate_pair, evaluate_pairs, prediction_interval, rank_histogram,
                             ranks_from_samples, relative_change, rmse, rollout_samples, sbc_chi2, sbc_ranks,
                             summarize, write_summary_json, write_window_csv)
from asbc.sim import GAUSSIAN, THETA_REC
from asbc.synth import synthetic_pairs

finite = st.floats(-100, 100)


def es_oracle(y, xs):
    n = len(xs)
    first = sum(np.linalg.norm(x - y) for x in xs) / n
    second = sum(np.linalg.norm(a - b) for a in xs for b in xs) / (2 * n * n)
    return first - second


# -- RMSE / ES -------------------------------------------------------------

def test_rmse_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert rmse(y, np.tile(y, (4, 1))) == 0.0
    assert rmse(y, (y + 2.5)[None]) == pytest.approx(2.5)
    assert rmse([0.0, 0.0], [[1.0, 1.0], [-1.0, -1.0]]) == 0.0


def test_rmse_shape():
    with pytest.raises(ShapeError):
        rmse(np.zeros(3), np.zeros((2, 4)))


def test_es_examples():
    y = np.array([1.0, -2.0])
    assert energy_score(y, np.tile(y, (5, 1))) == 0.0
    assert energy_score(y, [[4.0, 2.0]]) == pytest.approx(5.0)
    assert energy_score([0.0], [[1.0], [-1.0]]) == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        energy_score(np.zeros(2), np.zeros((3, 1)))


@given(hnp.arrays(float, 4, elements=finite), hnp.arrays(float, (6, 4), elements=finite))
def test_es_matches_oracle(y, xs):
    assert energy_score(y, xs) == pytest.approx(es_oracle(y, xs), rel=1e-9, abs=1e-9)
    assert energy_score(y, xs) >= -1e-9


def test_es_propriety():
    rng = np.random.default_rng(0)
    reps, n, mu = 10_000, 20, 0.3
    y = rng.normal(mu, 1, reps)
    z = rng.normal(0, 1, (reps, n))
    grid = np.round(np.arange(-0.5, 1.11, 0.2), 10)
    # 1-D energy score in closed vectorized form, common random numbers across the grid
    pair = np.abs(z[:, :, None] - z[:, None, :]).sum((1, 2)) / (2 * n * n)
    es = [np.mean(np.abs(z + g - y[:, None]).mean(1) - pair) for g in grid]
    assert abs(grid[int(np.argmin(es))] - mu) <= 0.1 + 1e-9


@given(hnp.arrays(float, 5, elements=finite), hnp.arrays(float, (7, 5), elements=finite))
def test_rmse_of_mean_below_mean_rmse(y, xs):
    individual = np.mean([rmse(y, x[None]) for x in xs])
    assert rmse(y, xs) <= individual + 1e-9


def test_metrics_deterministic():
    rng = np.random.default_rng(2)
    y, xs = rng.normal(size=10), rng.normal(size=(30, 10))
    assert energy_score(y, xs) == energy_score(y, xs) and rmse(y, xs) == rmse(y, xs)


# -- prediction intervals ------------------------------------------------------

def test_pi_constant():
    lo, hi = prediction_interval(np.full((40, 3), 2.5))
    np.testing.assert_array_equal(lo, 2.5)
    np.testing.assert_array_equal(hi, 2.5)


def test_pi_standard_normal():
    lo, hi = prediction_interval(np.random.default_rng(0).standard_normal((100_000, 1)))
    assert lo[0] == pytest.approx(-1.96, abs=0.02) and hi[0] == pytest.approx(1.96, abs=0.02)


def test_pi_level_zero_is_median():
    x = np.random.default_rng(1).normal(size=(11, 2))
    lo, hi = prediction_interval(x, 0.0)
    np.testing.assert_array_equal(lo, np.median(x, 0))
    np.testing.assert_array_equal(hi, np.median(x, 0))


def test_pi_too_few_samples():
    with pytest.raises(ConfigError):
        prediction_interval(np.zeros((19, 2)), 0.95)
    prediction_interval(np.zeros((20, 2)), 0.95)


# -- calibration ---------------------------------------------------------------

def test_sbc_calibrated_toy():
    # conjugate Gaussian: theta ~ N(0,1), x | theta ~ N(theta,1), posterior N(x/2, 1/2)
    rng = np.random.default_rng(0)
    n_pairs, n = 200, 99
    theta = rng.normal(size=(n_pairs, 1))
    x = theta + rng.normal(size=(n_pairs, 1))
    post = x[:, None, :] / 2 + np.sqrt(0.5) * rng.normal(size=(n_pairs, n, 1))
    ranks = ranks_from_samples(theta, post)
    assert sbc_chi2(ranks, n, bins=20)[0] > 0.01


def test_sbc_miscalibrated_toy():
    rng = np.random.default_rng(1)
    theta = rng.normal(size=(200, 1))
    x = theta + rng.normal(size=(200, 1))
    # overconfident posterior
    post = x[:, None, :] / 2 + 0.1 * rng.normal(size=(200, 99, 1))
    assert sbc_chi2(ranks_from_samples(theta, post), 99)[0] < 1e-6


def test_sbc_collapsed_below_truth():
    theta = np.ones((50, 2))
    ranks = ranks_from_samples(theta, np.zeros((50, 30, 2)))
    counts, _ = rank_histogram(ranks, 30, bins=10)
    assert (counts[:, -1] == 50).all()


def test_sbc_single_sample():
    rng = np.random.default_rng(2)
    ranks = ranks_from_samples(rng.normal(size=(100, 3)), rng.normal(size=(100, 1, 3)))
    assert set(np.unique(ranks)) <= {0, 1}


def test_rank_histogram_probs():
    _, probs = rank_histogram(np.zeros(3, dtype=int), 99, bins=20)
    assert probs.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(probs, 0.05)
    _, uneven = rank_histogram(np.zeros(3, dtype=int), 10, bins=4)
    np.testing.assert_allclose(uneven, np.array([3, 3, 3, 2]) / 11)


class _Fixed:
    def __init__(self, samples):
        self.samples = samples

    def posterior_samples(self, x, n, generator=None):
        return self.samples[:, :n]


def test_sbc_ranks_uses_model():
    samples = np.arange(10.0)[None, :, None].repeat(4, 0)
    ranks = sbc_ranks(_Fixed(samples), np.array([[-1.0], [3.5], [9.5], [20.0]]), None, 10)
    np.testing.assert_array_equal(ranks[:, 0], [0, 4, 10, 10])


# -- evaluation layout and rollouts --------------------------------------------

def test_layout_standard():
    sl, offs, overlap = eval_layout(300, EvalConfig())
    assert sl == slice(0, 75) and not overlap
    assert offs == list(range(75, 251, 20))


def test_layout_caps_windows():
    _, offs, _ = eval_layout(2000, EvalConfig())
    assert len(offs) == 20 and offs[0] == 75


def test_layout_short_history_flagged():
    _, offs, overlap = eval_layout(100, EvalConfig())
    assert overlap and offs == [0, 20, 40]
    with pytest.raises(ShapeError):
        eval_layout(49, EvalConfig())


def test_horizon_is_ten_seconds():
    assert EvalConfig().H * 0.2 == pytest.approx(10.0)


def test_closed_loop_oracle():
    theta = np.r_[THETA_REC, 1e-4]
    (pair,) = synthetic_pairs(1, 60.0, 0.2, GAUSSIAN, seed=4, theta=theta[None])
    res = evaluate_pair(None, pair.segment, EvalConfig(n_samples=30), 0, theta_samples=np.tile(theta, (30, 1)),
                        spec=GAUSSIAN)
    assert len(res) == 9  # offsets 75, 95, ..., 235
    for r in res:
        assert max(r.rmse.values()) < 5e-3
        assert max(r.es.values()) < 5e-3


def test_flag_reconciliation(small_pairs):
    seg = small_pairs[0].segment
    theta = np.tile(np.r_[THETA_REC, 0.05], (40, 1))
    theta[::2, 5] = 8.0  # huge residuals: some rollouts hit the speed clamp
    cfg = EvalConfig(n_samples=40, exclude_flagged=True)
    res = evaluate_pair(None, seg, cfg, 11, theta_samples=theta, spec=GAUSSIAN)
    total = 0
    for k, r in enumerate(res):
        _, _, flags = rollout_samples(theta, seg, r.offset, cfg.H, GAUSSIAN, 11, f"eval-rollout-0-{k}")
        assert r.n_flagged == int(flags.sum())
        assert r.n_used == (40 - r.n_flagged if r.n_flagged < 40 else 40)
        total += r.n_flagged
    assert total > 0
    assert summarize(res)["n_flagged"] == total


def test_evaluate_with_model_outputs(tmp_path, small_pairs):
    from test_flow import model as tiny_model  # noqa: E402

    m = tiny_model()
    cfg = EvalConfig(n_samples=20, target_len=12, m=3)
    res = evaluate_pairs(m, [p.segment for p in small_pairs[:2]], cfg, 0)
    assert len(res) == 6
    assert all(r.n_samples == 20 and min(r.rmse.values()) >= 0 for r in res)
    write_window_csv(res, tmp_path / "w.csv")
    df = pd.read_csv(tmp_path / "w.csv")
    assert len(df) == 6 and {"rmse_s", "es_mean", "n_flagged"} <= set(df.columns)
    s = write_summary_json(res, tmp_path / "s.json", [0], {"H": 50})
    assert json.loads((tmp_path / "s.json").read_text())["config_hash"] == config_hash({"H": 50})
    assert s["n_windows"] == 6
    assert len(error_distribution_data(res)) == 6 * 6


# -- ablation helpers -------------------------------------------------------------

def test_relative_change():
    assert relative_change(2.0, 1.5) == pytest.approx(25.0)
    assert relative_change(1.3, 1.3) == 0.0


def test_ablation_table():
    df = pd.DataFrame({"variant": ["full"] * 3 + ["prior_only"] * 3,
                       "holdout_nll": [1.0, 2.0, 3.0, 4.0, 4.0, 5.0]})
    t = ablation_table(df).set_index("variant")
    assert t.loc["full", "median"] == 2.0
    assert t.loc["prior_only", "relative_change_pct"] == pytest.approx(50.0)
    assert t.loc["full", "relative_change_pct"] == 0.0
