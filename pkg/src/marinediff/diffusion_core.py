"""Conditional noise predictor, mask losses and the training step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .cfln import CFLN, ConditionStack, timestep_embedding
from .config import RunConfig
from .schedule import NoiseSchedule, predict_x0, q_sample, to_signal
from .skd import ProjectorPair, consistency_loss, pool_condition

BCE_EPS = 1e-6


def _groups(c: int) -> int:
    return math.gcd(8, c)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.film = nn.Linear(time_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(t_emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class ConditionInjection(nn.Module):
    """Resize every pyramid level to the feature resolution, concat, 1x1 project."""

    def __init__(self, channels: int, cond_width: int, n_levels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels + cond_width * n_levels, channels, 1)

    def forward(self, h: Tensor, pyramid: list[Tensor]) -> Tensor:
        size = h.shape[-2:]
        conds = [c if c.shape[-2:] == size else F.interpolate(c, size=size, mode="bilinear", align_corners=False) for c in pyramid]
        return self.proj(torch.cat([h, *conds], dim=1))


class Denoiser(nn.Module):
    """Three-level encoder-decoder predicting the noise in ``x_t``.

    The input is folded 2x2 into channels first (and unfolded at the output),
    so the three levels run at strides 2, 4 and 8.
    """

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128), cond_width: int = 32, n_levels: int = 4, time_dim: int = 64):
        super().__init__()
        w1, w2, w3 = widths
        self.time_dim = time_dim
        hidden = 4 * time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.inp = nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(4, w1, 3, padding=1))
        self.inj = nn.ModuleList(ConditionInjection(w, cond_width, n_levels) for w in widths)
        self.enc1 = ResBlock(w1, w1, hidden)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w2, w2, hidden)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = ResBlock(w3, w3, hidden)
        self.dec2 = ResBlock(w3 + w2, w2, hidden)
        self.dec1 = ResBlock(w2 + w1, w1, hidden)
        self.out = nn.Sequential(nn.GroupNorm(_groups(w1), w1), nn.SiLU(), nn.Conv2d(w1, 4, 3, padding=1), nn.PixelShuffle(2))

    def forward(self, x_t: Tensor, pyramid: list[Tensor], t: Tensor) -> Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != 1:
            raise ValueError(f"x_t must be (B, 1, H, W), got {tuple(x_t.shape)}")
        if x_t.shape[-1] % 32 or x_t.shape[-2] % 32:
            raise ValueError(f"spatial dims must be divisible by 32, got {tuple(x_t.shape[-2:])}")
        te = self.time_mlp(timestep_embedding(t, self.time_dim).to(x_t.dtype))
        h1 = self.enc1(self.inj[0](self.inp(x_t), pyramid), te)
        h2 = self.enc2(self.inj[1](self.down1(h1), pyramid), te)
        h3 = self.mid(self.inj[2](self.down2(h2), pyramid), te)
        u2 = F.interpolate(h3, size=h2.shape[-2:], mode="nearest")
        d2 = self.dec2(torch.cat([u2, h2], dim=1), te)
        u1 = F.interpolate(d2, size=h1.shape[-2:], mode="nearest")
        d1 = self.dec1(torch.cat([u1, h1], dim=1), te)
        return self.out(d1)


class MarineSegmenter(nn.Module):
    """CFLN + noise predictor + distillation projectors."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfln = CFLN(cfg.widths, cfg.heads, cfg.cond_width, layers=cfg.layers)
        self.denoiser = Denoiser(cfg.denoiser_widths, cfg.cond_width, n_levels=len(cfg.layers))
        self.projectors = ProjectorPair(cfg.cond_width, cfg.embed_dim, cfg.latent_dim)

    def predict_noise(self, image: Tensor, x_t: Tensor, t: Tensor) -> tuple[Tensor, ConditionStack]:
        cond = self.cfln(image, x_t, t)
        return self.denoiser(x_t, cond.pyramid, t), cond


def predict_noise(model: MarineSegmenter, x_t: Tensor, conditions: ConditionStack, t: Tensor) -> Tensor:
    return model.denoiser(x_t, conditions.pyramid, t)


# --- losses -----------------------------------------------------------------


def boundary_weights(gt: Tensor) -> Tensor:
    """``1 + 5 |avgpool31(gt) - gt|`` with zero padding counted in the average."""
    return 1.0 + 5.0 * torch.abs(F.avg_pool2d(gt, kernel_size=31, stride=1, padding=15) - gt)


def _as_bchw(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def weighted_bce(prob: Tensor, gt: Tensor, weights: Tensor | None = None, eps: float = BCE_EPS) -> Tensor:
    prob, gt = _as_bchw(prob), _as_bchw(gt)
    w = boundary_weights(gt) if weights is None else _as_bchw(weights)
    p = prob.clamp(eps, 1.0 - eps)
    bce = -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p))
    return ((w * bce).sum(dim=(2, 3)) / w.sum(dim=(2, 3))).mean()


def weighted_bce_logits(logits: Tensor, gt: Tensor, weights: Tensor | None = None) -> Tensor:
    logits, gt = _as_bchw(logits), _as_bchw(gt)
    w = boundary_weights(gt) if weights is None else _as_bchw(weights)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    return ((w * bce).sum(dim=(2, 3)) / w.sum(dim=(2, 3))).mean()


def weighted_iou(prob: Tensor, gt: Tensor, weights: Tensor | None = None) -> Tensor:
    prob, gt = _as_bchw(prob), _as_bchw(gt)
    w = boundary_weights(gt) if weights is None else _as_bchw(weights)
    inter = (prob * gt * w).sum(dim=(2, 3))
    union = ((prob + gt) * w).sum(dim=(2, 3))
    return (1.0 - (inter + 1.0) / (union - inter + 1.0)).mean()


def mask_loss(prob: Tensor, gt: Tensor, terms: tuple[str, ...] = ("bce", "iou")) -> Tensor:
    """Weighted BCE + weighted IoU between a probability mask and a binary reference."""
    prob, gt = _as_bchw(prob), _as_bchw(gt)
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(gt.shape)}")
    w = boundary_weights(gt)
    loss = prob.new_zeros(())
    if "bce" in terms:
        loss = loss + weighted_bce(prob, gt, w)
    if "iou" in terms:
        loss = loss + weighted_iou(prob, gt, w)
    return loss


def mask_loss_logits(logits: Tensor, gt: Tensor, terms: tuple[str, ...] = ("bce", "iou")) -> Tensor:
    """Same as :func:`mask_loss` on ``sigmoid(logits)`` but without the clamp,
    so saturated wrong-side pixels still receive gradient."""
    logits, gt = _as_bchw(logits), _as_bchw(gt)
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    w = boundary_weights(gt)
    loss = logits.new_zeros(())
    if "bce" in terms:
        loss = loss + weighted_bce_logits(logits, gt, w)
    if "iou" in terms:
        loss = loss + weighted_iou(torch.sigmoid(logits), gt, w)
    return loss


def total_loss(l_consist, l_mask, lam: float = 0.5):
    return l_consist + lam * l_mask


@dataclass
class LossBundle:
    l_consist: float
    l_mask: float
    l_total: float
    lam: float
    n_distilled: int = 0


@dataclass
class Batch:
    image: Tensor  # (B, 3, H, W)
    mask: Tensor  # (B, 1, H, W) in {0, 1}
    tokens: Tensor | None = None  # (B, K, d)
    token_mask: Tensor | None = None  # (B, K)


def _mask_term_names(cfg: RunConfig) -> tuple[str, ...]:
    return tuple(t for t in cfg.loss_terms if t in ("bce", "iou"))


def compute_losses(
    model: MarineSegmenter,
    batch: Batch,
    sched: NoiseSchedule,
    cfg: RunConfig,
    generator: torch.Generator,
) -> tuple[Tensor, Tensor, Tensor, int]:
    """Forward pass of one training step; returns (total, consist, mask, n_distilled)."""
    B = batch.image.shape[0]
    x0 = to_signal(batch.mask)
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, cond = model.predict_noise(batch.image, x_t, t)
    x0_hat = predict_x0(x_t, eps_hat, t, sched)

    terms = _mask_term_names(cfg)
    l_mask = mask_loss_logits(cfg.logit_scale * x0_hat, batch.mask, terms) if terms else x0_hat.new_zeros(())

    l_consist, n = x0_hat.new_zeros(()), 0
    if cfg.use_consist and batch.tokens is not None:
        l_consist, valid = consistency_loss(
            pool_condition(cond.aggregated), batch.tokens, model.projectors, batch.token_mask
        )
        n = int(valid.sum())
    return total_loss(l_consist, l_mask, cfg.lam), l_consist, l_mask, n


def train_step(
    model: MarineSegmenter,
    batch: Batch,
    sched: NoiseSchedule,
    cfg: RunConfig,
    generator: torch.Generator,
    optimizer: torch.optim.Optimizer | None = None,
) -> LossBundle:
    """One optimisation step. With ``optimizer=None`` only the losses are evaluated."""
    model.train(optimizer is not None)
    if optimizer is None:
        with torch.no_grad():
            total, lc, lm, n = compute_losses(model, batch, sched, cfg, generator)
    else:
        optimizer.zero_grad(set_to_none=True)
        total, lc, lm, n = compute_losses(model, batch, sched, cfg, generator)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
    bundle = LossBundle(float(lc.detach()), float(lm.detach()), float(total.detach()), cfg.lam, n)
    if not np.isfinite(bundle.l_total):
        raise FloatingPointError(f"non-finite loss: {bundle}")
    return bundle


def make_optimizer(model: nn.Module, cfg: RunConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay)
    return opt, sched
