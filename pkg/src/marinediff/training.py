"""Epoch loop around :func:`train_step` plus batched inference helpers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import Sample, resize_sample
from .diffusion_core import Batch, LossBundle, MarineSegmenter, make_optimizer, train_step
from .region_word import FeatureEmbedding, distillation_tokens
from .sampler import EnsembleResult, sample_masks
from .schedule import NoiseSchedule, make_linear_schedule

log = logging.getLogger(__name__)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def image_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous().float()


def mask_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]))[:, None].float()


@dataclass
class TrainingSet:
    images: torch.Tensor
    masks: torch.Tensor
    tokens: torch.Tensor  # (N, K, d), zero padded
    token_mask: torch.Tensor  # (N, K)
    ids: list[str]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx: np.ndarray) -> Batch:
        i = torch.as_tensor(idx, dtype=torch.long)
        return Batch(self.images[i], self.masks[i], self.tokens[i], self.token_mask[i])


def build_training_set(samples: Sequence[Sample], cfg: RunConfig, backend=None) -> TrainingSet:
    """Resize samples and precompute distillation tokens once per sample."""
    backend = backend or FeatureEmbedding(d=cfg.embed_dim)
    samples = [resize_sample(s, cfg.image_size) for s in samples]
    toks, skipped = [], []
    for s in samples:
        tk = distillation_tokens(s.image, s.caption, backend, cfg.matching) if cfg.use_consist else None
        if tk is None or len(tk) == 0:
            if cfg.use_consist:
                skipped.append(s.id)
            tk = np.zeros((0, cfg.embed_dim))
        toks.append(np.asarray(tk, dtype=np.float32))
    if skipped:
        log.warning("%d samples without usable caption nouns; distillation skipped for them", len(skipped))
    K = max(1, max(len(t) for t in toks))
    tokens = torch.zeros(len(samples), K, cfg.embed_dim)
    tmask = torch.zeros(len(samples), K, dtype=torch.bool)
    for n, t in enumerate(toks):
        tokens[n, : len(t)] = torch.from_numpy(t)
        tmask[n, : len(t)] = True
    return TrainingSet(image_tensor(samples), mask_tensor(samples), tokens, tmask, [s.id for s in samples], skipped)


class Trainer:
    def __init__(self, cfg: RunConfig, model: MarineSegmenter | None = None):
        self.cfg = cfg
        self.sched: NoiseSchedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        torch.manual_seed(cfg.seed)
        self.model = model or MarineSegmenter(cfg)
        self.optimizer, self.lr_sched = make_optimizer(self.model, cfg)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []

    def fit(self, data: TrainingSet, epochs: int | None = None, progress: bool = False) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(self.cfg.seed)
        bs = self.cfg.batch_size
        for _ in range(epochs):
            t0 = time.time()
            order = rng.permutation(len(data))
            bundles: list[LossBundle] = []
            for start in range(0, len(order), bs):
                bundles.append(train_step(self.model, data.batch(order[start : start + bs]), self.sched, self.cfg, self.generator, self.optimizer))
                self.step += 1
            self.lr_sched.step()
            self.epoch += 1
            rec = dict(
                epoch=self.epoch,
                step=self.step,
                l_total=float(np.mean([b.l_total for b in bundles])),
                l_mask=float(np.mean([b.l_mask for b in bundles])),
                l_consist=float(np.mean([b.l_consist for b in bundles])),
                seconds=time.time() - t0,
            )
            self.history.append(rec)
            (log.info if not progress else print)(
                "epoch %(epoch)d  total %(l_total).4f  mask %(l_mask).4f  consist %(l_consist).4f  (%(seconds).1fs)" % rec
            )
        return self.history


def predict(
    model: MarineSegmenter,
    images: torch.Tensor,
    cfg: RunConfig,
    sched: NoiseSchedule | None = None,
    seed: int = 0,
    batch_size: int = 50,
) -> list[EnsembleResult]:
    sched = sched or make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    gen = torch.Generator().manual_seed(seed)
    out: list[EnsembleResult] = []
    for start in range(0, images.shape[0], batch_size):
        out.extend(sample_masks(model, images[start : start + batch_size], sched, cfg, gen))
    return out
