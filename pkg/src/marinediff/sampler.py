"""Short-schedule deterministic reverse diffusion and consensus fusion.

Every reverse step re-runs the CFLN on (image, current x_t, t), so the
condition follows the evolving mask. Each step's clean-mask estimate is kept
and the stack is fused by majority vote times the normalised mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .config import RunConfig
from .diffusion_core import MarineSegmenter
from .schedule import (
    NoiseSchedule,
    ddim_subsequence,
    eps_from_x0,
    posterior_mean,
    posterior_std,
    predict_x0,
    to_prob,
)


class NumericalError(FloatingPointError):
    pass


@dataclass
class EnsembleResult:
    steps: list[int]
    per_step_preds: np.ndarray  # (S, H, W) in [0, 1], sampling order
    binarized: np.ndarray  # (S, H, W) in {0, 1}
    vote_mask: np.ndarray  # (H, W) in {0, 1}
    fused: np.ndarray  # (H, W) in [0, 1]

    @property
    def final(self) -> np.ndarray:
        """Prediction of the last reverse step (fusion disabled)."""
        return self.per_step_preds[-1]


def binarize(preds: np.ndarray, mode: str = "mean") -> np.ndarray:
    """``P > threshold`` per prediction; a constant map binarises to zeros."""
    preds = np.asarray(preds, dtype=np.float64)
    if mode == "mean":
        thr = preds.reshape(preds.shape[0], -1).mean(axis=1).reshape((-1,) + (1,) * (preds.ndim - 1))
    elif mode == "global":
        thr = 0.5
    elif mode == "ensemble":
        thr = preds.mean()
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return (preds > thr).astype(np.float64)


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def cds_parts(preds: np.ndarray, phi: float = 0.5, mode: str = "mean"):
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] < 1:
        raise ValueError("expected a (S, H, W) stack of predictions")
    S = preds.shape[0]
    b = binarize(preds, mode)
    vote = np.floor(b.sum(axis=0) / S + phi)
    fused = vote * minmax(preds.sum(axis=0) / S)
    return b, vote, fused


def cds_ensemble(preds: np.ndarray, phi: float = 0.5, mode: str = "mean") -> np.ndarray:
    """Fuse S per-step predictions: ``floor(mean(P^b) + phi) * Norm(mean(P))``."""
    return cds_parts(preds, phi, mode)[2]


def cds_ensemble_reference(preds, phi: float = 0.5) -> np.ndarray:
    """Pixel-by-pixel evaluator of the fusion rule with exact vote arithmetic."""
    preds = np.asarray(preds, dtype=np.float64)
    S, H, W = preds.shape
    thr = [sum(float(v) for v in preds[s].ravel()) / (H * W) for s in range(S)]
    mean = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for s in range(S):
                acc += float(preds[s, i, j])
            mean[i, j] = acc / S
    lo, hi = min(mean.ravel()), max(mean.ravel())
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            votes = sum(1 for s in range(S) if preds[s, i, j] > thr[s])
            keep = math.floor(Fraction(votes, S) + Fraction(phi))
            norm = 0.0 if hi == lo else (mean[i, j] - lo) / (hi - lo)
            out[i, j] = keep * norm
    return out


@torch.no_grad()
def sample_masks(
    model: MarineSegmenter,
    images: torch.Tensor,
    sched: NoiseSchedule,
    cfg: RunConfig,
    generator: torch.Generator | None = None,
    S: int | None = None,
) -> list[EnsembleResult]:
    """Run the reverse chain for a batch of images ``(B, 3, H, W)``."""
    model.eval()
    S = S or cfg.S
    steps = ddim_subsequence(sched.T, S)
    B, _, H, W = images.shape
    x = torch.randn((B, 1, H, W), generator=generator, dtype=images.dtype)
    preds = []
    for k, t in enumerate(steps):
        tt = torch.full((B,), t, dtype=torch.long)
        eps_hat, _ = model.predict_noise(images, x, tt)
        x0_hat = predict_x0(x, eps_hat, t, sched)
        if not torch.isfinite(x0_hat).all():
            raise NumericalError(f"non-finite prediction at step {t}; weights may be untrained or corrupt")
        preds.append(to_prob(x0_hat, cfg.logit_scale)[:, 0].double().numpy())
        t_prev = steps[k + 1] if k + 1 < len(steps) else 0
        if cfg.sampler == "ddim":
            x0_use = x0_hat.clamp(-1, 1) if cfg.clip_x0 else x0_hat
            eps_use = eps_from_x0(x, x0_use, t, sched) if cfg.clip_x0 else eps_hat
            ab_prev = sched.alpha_bar(t_prev)
            x = ab_prev**0.5 * x0_use + (1 - ab_prev) ** 0.5 * eps_use
        else:
            x = posterior_mean(x, eps_hat, t, sched, cfg.posterior_mean_convention)
            if t > 1:
                x = x + posterior_std(t, sched) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    stack = np.stack(preds, axis=1)  # (B, S, H, W)
    out = []
    for b in range(B):
        binar, vote, fused = cds_parts(stack[b], cfg.phi, cfg.binarize)
        out.append(EnsembleResult(steps, stack[b], binar, vote, fused))
    return out


def sample_mask(model, image, sched, cfg, generator=None, S=None) -> EnsembleResult:
    """Single image ``(3, H, W)`` or ``(H, W, 3)`` numpy/torch."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float32)) if not isinstance(image, torch.Tensor) else image.float()
    if img.ndim == 3 and img.shape[-1] == 3 and img.shape[0] != 3:
        img = img.permute(2, 0, 1)
    return sample_masks(model, img[None], sched, cfg, generator, S)[0]


def output_mask(result: EnsembleResult, cds: bool = True) -> np.ndarray:
    return result.fused if cds else result.final
