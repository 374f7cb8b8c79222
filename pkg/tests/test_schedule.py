from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from marinediff.schedule import (
    ddim_subsequence,
    make_linear_schedule,
    posterior_mean,
    posterior_std,
    predict_x0,
    q_sample,
    q_step,
    to_prob,
    to_signal,
)

# hand-derived values for betas 0.1, 0.2, 0.3, 0.4 (exact rational arithmetic)
T4_ALPHA_BARS = [0.9, 0.72, 0.504, 0.3024]
T4_POSTERIOR_VARS = [0.0, 1 / 14, 21 / 124, 31 / 109]
T4_QSAMPLE_T4 = 1.3851336041075448  # sqrt(0.3024) + sqrt(0.6976)
T4_MEAN_T2_CUMULATIVE = 0.7330758987902052  # (1 - 0.2/sqrt(0.28)) / sqrt(0.72)
T4_MEAN_T2_DDPM = 0.6954568613856366  # (1 - 0.2/sqrt(0.28)) / sqrt(0.8)


@pytest.fixture
def t4():
    return make_linear_schedule(4, 0.1, 0.4)


def test_default_schedule_endpoints():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.betas[0] == pytest.approx(1e-4, abs=1e-15)
    assert s.betas[-1] == pytest.approx(0.02, abs=1e-15)
    assert np.allclose(np.diff(s.betas), (0.02 - 1e-4) / 999)


def test_single_step_schedule():
    s = make_linear_schedule(1, 1e-4, 0.02)
    assert list(s.betas) == [1e-4]
    assert s.alpha_bars[0] == pytest.approx(0.9999)
    assert s.posterior_vars[0] == 0.0


def test_t4_hand_values(t4):
    assert np.allclose(t4.alpha_bars, T4_ALPHA_BARS, atol=1e-12)
    assert np.allclose(t4.posterior_vars, T4_POSTERIOR_VARS, atol=1e-12)
    assert t4.alpha_bar(0) == 1.0


@pytest.mark.parametrize("T", [1, 2, 10, 100, 1000])
def test_schedule_invariants(T):
    s = make_linear_schedule(T, 1e-4, 0.02)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] <= s.alpha_bars[0] < 1
    assert s.posterior_vars[0] == 0.0
    assert np.all(s.posterior_vars[1:] > 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_q_sample_examples(t4):
    x0 = np.array([1.0, -1.0, 0.5])
    assert np.array_equal(q_sample(x0, 3, np.zeros(3), t4), math.sqrt(0.504) * x0)
    e = np.array([0.3, -2.0, 1.0])
    assert np.allclose(q_sample(np.zeros(3), 3, e, t4), math.sqrt(1 - 0.504) * e)
    assert q_sample(np.array([1.0]), 4, np.array([1.0]), t4)[0] == pytest.approx(T4_QSAMPLE_T4, abs=1e-12)


def test_q_sample_errors(t4):
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1, np.zeros(4), t4)
    for t in (0, 5):
        with pytest.raises(ValueError):
            q_sample(np.zeros(3), t, np.zeros(3), t4)


def test_q_step_examples():
    s = make_linear_schedule(2, 0.19, 0.19)
    assert q_step(np.array([1.0]), 1, np.array([0.0]), s)[0] == pytest.approx(0.9, abs=1e-12)
    tiny = make_linear_schedule(1, 1e-12, 1e-12)
    x = np.array([0.7, -0.2])
    assert np.allclose(q_step(x, 1, np.zeros(2), tiny), x, atol=1e-9)


def test_predict_x0_examples(t4):
    x = np.array([0.4, -1.3])
    assert np.allclose(predict_x0(x, np.zeros(2), 2, t4), x / math.sqrt(0.72))
    rng = np.random.default_rng(0)
    x0, e = rng.uniform(-1, 1, 50), rng.standard_normal(50)
    assert np.abs(predict_x0(q_sample(x0, 2, e, t4), e, 2, t4) - x0).max() < 1e-6


@settings(max_examples=60, deadline=None)
@given(
    T=st.integers(1, 1000),
    frac=st.floats(0, 1),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(T, frac, seed):
    s = make_linear_schedule(T, 1e-4, 0.02)
    t = 1 + int(frac * (T - 1))
    rng = np.random.default_rng(seed)
    x0 = to_signal((rng.random((8, 8)) > 0.5).astype(np.float64))
    e = rng.standard_normal((8, 8))
    assert np.abs(predict_x0(q_sample(x0, t, e, s), e, t, s) - x0).max() <= 1e-5


def test_round_trip_torch_batched_steps():
    s = make_linear_schedule(100, 1e-3, 0.2)
    g = torch.Generator().manual_seed(0)
    # float64: at t = T the division by sqrt(alpha_bar) ~ 6e-3 amplifies float32 rounding
    x0 = to_signal((torch.rand(6, 1, 8, 8, generator=g) > 0.5).double())
    e = torch.randn(6, 1, 8, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 2, 50, 98, 99, 100])
    err = (predict_x0(q_sample(x0, t, e, s), e, t, s) - x0).abs().max()
    assert float(err) <= 1e-5


def test_composed_q_step_matches_marginal():
    """Chained one-step noising has the closed-form marginal moments."""
    s = make_linear_schedule(100, 1e-3, 0.2)
    n = 10_000
    rng = np.random.default_rng(12345)
    start = time.perf_counter()
    x0 = np.array([-1.0, 0.0, 0.5, 1.0])
    for t_star in (1, 5, 30, 100):
        x = np.broadcast_to(x0, (n, 4)).copy()
        for t in range(1, t_star + 1):
            x = q_step(x, t, rng.standard_normal(x.shape), s)
        ab = s.alpha_bar(t_star)
        mean, var = math.sqrt(ab) * x0, 1.0 - ab
        se_mean = math.sqrt(var / n)
        se_var = var * math.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se_mean)
        assert np.all(np.abs(x.var(axis=0, ddof=1) - var) < 3 * se_var)
    assert time.perf_counter() - start < 10


def test_posterior_mean_examples(t4):
    x = np.array([1.0])
    assert np.allclose(posterior_mean(np.array([0.6, -0.1]), np.zeros(2), 3, t4), np.array([0.6, -0.1]) / math.sqrt(0.504))
    assert posterior_mean(x, x, 2, t4)[0] == pytest.approx(T4_MEAN_T2_CUMULATIVE, abs=1e-12)
    assert posterior_mean(x, x, 2, t4, convention="ddpm")[0] == pytest.approx(T4_MEAN_T2_DDPM, abs=1e-12)
    # both conventions coincide at t = 1
    assert posterior_mean(x, x, 1, t4)[0] == pytest.approx(posterior_mean(x, x, 1, t4, convention="ddpm")[0])
    with pytest.raises(ValueError):
        posterior_mean(x, x, 2, t4, convention="other")


def test_single_step_chain_recovers_x0():
    s = make_linear_schedule(1, 1e-4, 0.02)
    rng = np.random.default_rng(3)
    x0, e = rng.uniform(-1, 1, 16), rng.standard_normal(16)
    x1 = q_sample(x0, 1, e, s)
    assert posterior_std(1, s) == 0.0
    assert np.allclose(posterior_mean(x1, e, 1, s), x0, atol=1e-12)


def test_ddim_subsequence_examples():
    s = ddim_subsequence(1000, 10)
    assert len(s) == 10 and s[0] == 1000 and s[-1] == 1
    assert ddim_subsequence(100, 4) == [100, 67, 34, 1]
    assert ddim_subsequence(7, 7) == [7, 6, 5, 4, 3, 2, 1]
    with pytest.raises(ValueError):
        ddim_subsequence(10, 11)


@given(T=st.integers(1, 2000), data=st.data())
def test_ddim_subsequence_property(T, data):
    S = data.draw(st.integers(1, T))
    s = ddim_subsequence(T, S)
    assert len(s) == S and s[0] == T and s[-1] == (1 if S > 1 else T)
    assert all(a > b for a, b in zip(s, s[1:]))
    gaps = np.diff(s)
    assert gaps.size == 0 or gaps.max() - gaps.min() <= 1


def test_signal_mapping():
    m = np.array([0.0, 1.0])
    assert np.array_equal(to_signal(m), [-1.0, 1.0])
    assert np.allclose(to_prob(np.array([-1.0, 0.0, 1.0]), 4.0), [1 / (1 + math.e**4), 0.5, 1 / (1 + math.e**-4)])
    assert torch.allclose(to_prob(torch.tensor([0.0])), torch.tensor([0.5]))
