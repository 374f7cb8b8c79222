"""Closed-form diffusion arithmetic on a discrete linear noise schedule.

Steps are 1-based: ``t = 1..T``. ``alpha_bars[t - 1]`` holds the cumulative
product up to step ``t``; the convention ``alpha_bar(0) = 1`` is exposed via
:meth:`NoiseSchedule.alpha_bar`.

All functions accept numpy arrays or torch tensors. ``t`` may be a python int
or a 1-d integer array/tensor with one step per batch entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

POSTERIOR_MEAN_CONVENTIONS = ("cumulative", "ddpm")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at step ``t`` with ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def check_step(self, t) -> None:
        arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if arr.size == 0 or arr.min() < 1 or arr.max() > self.T:
            raise ValueError(f"step out of range 1..{self.T}: {t}")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
    for a in (betas, alphas, alpha_bars, posterior_vars):
        a.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, posterior_vars)


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t-1]`` and shape it to broadcast against ``like``."""
    if isinstance(like, torch.Tensor):
        if isinstance(t, torch.Tensor):
            idx = t.detach().cpu().long().numpy() - 1
        else:
            idx = np.asarray(t, dtype=np.int64) - 1
        c = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    else:
        like = np.asarray(like)
        c = np.asarray(values[np.asarray(t, dtype=np.int64) - 1], dtype=np.result_type(like.dtype, np.float64))
    if c.ndim == 1:
        c = c.reshape((-1,) + (1,) * (like.ndim - 1))
    return c


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _sqrt(x):
    return torch.sqrt(x) if isinstance(x, torch.Tensor) else np.sqrt(x)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Draw from the closed-form marginal ``q(x_t | x_0)``."""
    _check_shapes(x0, eps)
    sched.check_step(t)
    ab = _coef(sched.alpha_bars, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def q_step(x_prev, t, eps, sched: NoiseSchedule):
    """One Markov forward step ``x_{t-1} -> x_t``."""
    _check_shapes(x_prev, eps)
    sched.check_step(t)
    b = _coef(sched.betas, t, x_prev)
    return _sqrt(1.0 - b) * x_prev + _sqrt(b) * eps


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule):
    _check_shapes(x_t, eps_hat)
    sched.check_step(t)
    ab = _coef(sched.alpha_bars, t, x_t)
    return (x_t - _sqrt(1.0 - ab) * eps_hat) / _sqrt(ab)


def eps_from_x0(x_t, x0, t, sched: NoiseSchedule):
    """Noise implied by ``x_t`` and a (possibly clipped) clean estimate."""
    _check_shapes(x_t, x0)
    sched.check_step(t)
    ab = _coef(sched.alpha_bars, t, x_t)
    return (x_t - _sqrt(ab) * x0) / _sqrt(1.0 - ab)


def posterior_mean(x_t, eps_hat, t, sched: NoiseSchedule, convention: str = "cumulative"):
    """Reverse-step mean.

    ``convention="cumulative"`` divides by ``sqrt(alpha_bar_t)``; ``"ddpm"`` uses the
    usual ``sqrt(alpha_t)``. The two agree only at ``t = 1``.
    """
    if convention not in POSTERIOR_MEAN_CONVENTIONS:
        raise ValueError(f"unknown posterior mean convention {convention!r}")
    _check_shapes(x_t, eps_hat)
    sched.check_step(t)
    ab = _coef(sched.alpha_bars, t, x_t)
    b = _coef(sched.betas, t, x_t)
    lead = ab if convention == "cumulative" else _coef(sched.alphas, t, x_t)
    return (x_t - b / _sqrt(1.0 - ab) * eps_hat) / _sqrt(lead)


def posterior_std(t: int, sched: NoiseSchedule) -> float:
    sched.check_step(t)
    return math.sqrt(float(sched.posterior_vars[t - 1]))


def ddim_subsequence(T: int, S: int) -> list[int]:
    """``S`` evenly spaced steps from ``T`` down to ``1`` (rounded to nearest)."""
    if S < 1 or T < 1:
        raise ValueError("need S >= 1 and T >= 1")
    if S > T:
        raise ValueError(f"S={S} exceeds T={T}")
    if S == 1:
        return [T]
    return [int(math.floor(T - k * (T - 1) / (S - 1) + 0.5)) for k in range(S)]


def to_signal(mask):
    """Binary/probability mask in [0, 1] -> signal range [-1, 1]."""
    return mask * 2.0 - 1.0


def to_prob(x0, logit_scale: float = 8.0):
    """Signal-range estimate -> mask probability via a logistic squash."""
    if isinstance(x0, torch.Tensor):
        return torch.sigmoid(logit_scale * x0)
    return 1.0 / (1.0 + np.exp(-logit_scale * np.asarray(x0)))
