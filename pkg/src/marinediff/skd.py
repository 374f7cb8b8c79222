"""Semantic knowledge distillation: align pooled conditions with word tokens."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ProjectorPair(nn.Module):
    """Separate visual and textual projectors into a shared latent space."""

    def __init__(self, visual_dim: int, text_dim: int = 64, latent_dim: int = 64):
        super().__init__()
        self.proj_v = nn.Sequential(nn.Linear(visual_dim, latent_dim), nn.GELU(), nn.Linear(latent_dim, latent_dim))
        self.proj_t = nn.Linear(text_dim, latent_dim)
        self.latent_dim = latent_dim


def pool_condition(cond: Tensor) -> Tensor:
    """Global average pool of a (B, C, H, W) condition map."""
    return cond.mean(dim=(-2, -1))


def cosine_consistency(v: Tensor, tokens: Tensor, token_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Negative mean cosine between each visual vector and its tokens.

    ``v`` is (B, p); ``tokens`` is (B, K, p) with ``token_mask`` (B, K) marking
    real entries. Returns the batch loss averaged over samples that have at
    least one token, and the boolean vector of such samples. A batch with no
    usable sample yields a zero loss.
    """
    if token_mask is None:
        token_mask = torch.ones(tokens.shape[:2], dtype=torch.bool, device=tokens.device)
    cos = F.cosine_similarity(v[:, None, :], tokens, dim=-1, eps=1e-8)
    m = token_mask.to(cos.dtype)
    counts = m.sum(dim=1)
    valid = counts > 0
    if not valid.any():
        return cos.sum() * 0.0, valid
    per_sample = (cos * m).sum(dim=1)[valid] / counts[valid]
    return -per_sample.mean(), valid


def consistency_loss(
    conditions: Tensor,
    tokens: Tensor,
    projectors: ProjectorPair,
    token_mask: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Distillation loss in [-1, 1].

    ``conditions`` are pooled condition vectors (B, C); ``tokens`` are the
    selected word embeddings (B, K, d). Every token of a sample is paired with
    that sample's single pooled vector.
    """
    if tokens.ndim == 2:
        tokens = tokens[None]
    if conditions.ndim == 1:
        conditions = conditions[None]
    v = projectors.proj_v(conditions)
    t = projectors.proj_t(tokens)
    return cosine_consistency(v, t, token_mask)
