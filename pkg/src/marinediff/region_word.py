"""Region-word matching: find the caption nouns that describe salient regions.

Images are split into region crops by thresholding a colour-contrast prior,
captions are reduced to nouns, both are embedded into one space and each noun
is scored by its softmax share averaged over regions. Nouns scoring at or
above the mean score are kept as distillation targets. Training-time only.
"""

from __future__ import annotations

import hashlib
import re
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.filters import threshold_otsu

# Appearance prototypes shared with the synthetic generator: clean RGB colour,
# fill ratio (area / bbox area) and elongation (short side / long side).
ORGANISMS = {
    "fish": dict(color=(1.00, 0.55, 0.10), fill=0.785, elong=0.50),
    "starfish": dict(color=(0.95, 0.25, 0.20), fill=0.45, elong=1.00),
    "jellyfish": dict(color=(1.00, 0.65, 0.90), fill=0.70, elong=0.85),
    "crab": dict(color=(0.90, 0.35, 0.10), fill=0.785, elong=0.75),
    "turtle": dict(color=(0.70, 0.90, 0.30), fill=0.785, elong=0.70),
}
DISTRACTORS = {
    "coral": dict(color=(0.40, 0.20, 0.35), fill=0.60, elong=0.80),
    "rock": dict(color=(0.30, 0.30, 0.32), fill=0.785, elong=0.70),
    "seaweed": dict(color=(0.15, 0.35, 0.15), fill=0.40, elong=0.25),
}
NOUN_LEXICON = frozenset(ORGANISMS) | frozenset(DISTRACTORS) | frozenset(
    {"sand", "water", "sea", "reef", "diver", "shark", "eel", "octopus", "shell", "seabed", "bottom", "ocean"}
)
STOP_WORDS = frozenset(
    """a an the this that these those some any each every one two three
    above below under over near by beside behind in on at of with without from to into onto
    among between around across against along through and or but
    it its he she they them their his her we us our you your i me my which who whom what
    is are was were be been being has have had there here""".split()
)
# Modifiers the templated captions use; anything else unknown counts as a noun.
MODIFIERS = frozenset(
    """bright dark pale small large big tiny little murky blurry faint vivid
    orange red pink yellow green purple grey gray white brown blue
    swimming resting hiding drifting floating lying crawling""".split()
)

_FEAT_CENTER = np.array([0.5, 0.5, 0.5, 0.1, 0.1, 0.1, 0.6, 0.6])
N_STATS = len(_FEAT_CENTER)


@dataclass
class RegionSet:
    regions: list[np.ndarray]
    masks: list[np.ndarray]
    source_boxes: list[tuple[int, int, int, int]]  # (y0, x0, y1, x1), half-open

    @property
    def M(self) -> int:
        return len(self.regions)


@dataclass
class WordSet:
    words: list[str]
    positions: list[int]

    @property
    def N(self) -> int:
        return len(self.words)


@dataclass
class TokenSelection:
    scores: np.ndarray
    mean_threshold: float
    selected: list[int]
    selected_embeddings: np.ndarray


@dataclass
class RegionParams:
    max_regions: int = 8
    min_area_frac: float = 0.002
    blur_sigma: float = 1.0
    # externally supplied HxW boolean masks bypass the contrast segmenter
    region_masks: Sequence[np.ndarray] | None = field(default=None, repr=False)


class EmbeddingBackend(Protocol):
    d: int

    def embed_region(self, region: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray: ...

    def embed_word(self, word: str) -> np.ndarray: ...


def saliency_prior(image: np.ndarray, blur_sigma: float = 1.0) -> np.ndarray:
    """Per-pixel Lab distance of the blurred image from its mean colour."""
    lab = rgb2lab(np.clip(image, 0.0, 1.0))
    if blur_sigma > 0:
        lab = ndimage.gaussian_filter(lab, sigma=(blur_sigma, blur_sigma, 0))
    return np.linalg.norm(lab - lab.reshape(-1, 3).mean(axis=0), axis=-1)


def _crop(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]:
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    m = mask[y0:y1, x0:x1]
    return image[y0:y1, x0:x1] * m[..., None], m, (int(y0), int(x0), int(y1), int(x1))


def segment_image_regions(image: np.ndarray, params: RegionParams | None = None) -> RegionSet:
    params = params or RegionParams()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 16 or image.shape[1] < 16:
        raise ValueError(f"expected HxWxC image with H, W >= 16, got {image.shape}")
    h, w = image.shape[:2]

    if params.region_masks is not None:
        masks = [np.asarray(m, dtype=bool) for m in params.region_masks if np.any(m)]
    else:
        prior = saliency_prior(image, params.blur_sigma)
        masks = []
        if np.ptp(prior) > 1e-6:
            fg = prior > threshold_otsu(prior)
            labels, n = ndimage.label(fg, structure=np.ones((3, 3)))
            if n:
                sizes = np.bincount(labels.ravel())[1:]
                min_area = max(4, int(params.min_area_frac * h * w))
                order = [k for k in np.argsort(-sizes, kind="stable") if sizes[k] >= min_area]
                masks = [labels == k + 1 for k in order[: params.max_regions]]
    if not masks:
        masks = [np.ones((h, w), dtype=bool)]

    out = RegionSet([], [], [])
    for m in masks[: params.max_regions]:
        region, crop_mask, box = _crop(image, m)
        out.regions.append(region)
        out.masks.append(crop_mask)
        out.source_boxes.append(box)
    return out


def _normalize_word(word: str) -> str:
    if word not in NOUN_LEXICON and word.endswith("es") and word[:-2] in NOUN_LEXICON:
        return word[:-2]
    if word not in NOUN_LEXICON and word.endswith("s") and word[:-1] in NOUN_LEXICON:
        return word[:-1]
    return word


def segment_text_words(caption: str) -> WordSet:
    """Ordered nouns of ``caption``; an empty result means skip distillation."""
    if not caption or not caption.strip():
        raise ValueError("empty caption")
    out = WordSet([], [])
    for pos, raw in enumerate(re.findall(r"[a-z]+", caption.lower())):
        word = _normalize_word(raw)
        if word in STOP_WORDS or word in MODIFIERS:
            continue
        out.words.append(word)
        out.positions.append(pos)
    return out


def caption_words(caption: str) -> list[str]:
    return [_normalize_word(w) for w in re.findall(r"[a-z]+", caption.lower())]


class FeatureEmbedding:
    """Deterministic CLIP-free joint embedding.

    Regions are described by masked colour statistics and two shape ratios;
    words by the same statistics of their lexicon prototype (zeros when
    unknown) plus a hashed one-hot. One fixed random matrix maps both into
    ``d`` dimensions, then vectors are scaled to norm ``scale``.
    """

    def __init__(self, d: int = 64, n_buckets: int = 56, seed: int = 0, scale: float = 3.0):
        self.d = d
        self.n_buckets = n_buckets
        self.scale = scale
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((d, N_STATS + n_buckets)) / np.sqrt(d)

    def _finish(self, feat: np.ndarray) -> np.ndarray:
        v = self.proj @ feat
        n = np.linalg.norm(v)
        return v * (self.scale / n) if n > 0 else v

    @staticmethod
    def stats(region: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        region = np.asarray(region, dtype=np.float64)
        if mask is None:
            mask = np.ones(region.shape[:2], dtype=bool)
        px = region[mask] if mask.any() else region.reshape(-1, region.shape[-1])
        h, w = mask.shape
        fill = mask.mean()
        elong = min(h, w) / max(h, w)
        return np.concatenate([px.mean(0), px.std(0), [fill, elong]])

    def embed_region(self, region: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        feat = np.zeros(N_STATS + self.n_buckets)
        feat[:N_STATS] = self.stats(region, mask) - _FEAT_CENTER
        return self._finish(feat)

    def embed_word(self, word: str) -> np.ndarray:
        feat = np.zeros(N_STATS + self.n_buckets)
        proto = ORGANISMS.get(word) or DISTRACTORS.get(word)
        if proto is not None:
            feat[:N_STATS] = np.array([*proto["color"], 0.05, 0.05, 0.05, proto["fill"], proto["elong"]]) - _FEAT_CENTER
        bucket = int.from_bytes(hashlib.sha1(word.encode()).digest()[:4], "little") % self.n_buckets
        feat[N_STATS + bucket] = 1.0
        return self._finish(feat)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def region_word_scores(regions: RegionSet, words: WordSet, backend: EmbeddingBackend) -> np.ndarray:
    """Per-word score: softmax over words of region-word logits, averaged over regions."""
    if regions.M < 1 or words.N < 1:
        raise ValueError("need at least one region and one word")
    fv = np.stack([backend.embed_region(r, m) for r, m in zip(regions.regions, regions.masks)])
    ft = np.stack([backend.embed_word(w) for w in words.words])
    if fv.shape[1] != ft.shape[1]:
        raise ValueError(f"embedding dims differ: region {fv.shape[1]} vs word {ft.shape[1]}")
    return _softmax_rows(fv @ ft.T).mean(axis=0)


def select_salient_tokens(R: np.ndarray, words: WordSet, backend: EmbeddingBackend | None = None) -> TokenSelection:
    R = np.asarray(R, dtype=np.float64)
    if R.size == 0:
        raise ValueError("empty score vector")
    # exact rational comparison: a float mean can overshoot every entry of a flat R
    total = sum(Fraction(float(r)) for r in R)
    selected = [k for k in range(R.size) if Fraction(float(R[k])) * R.size >= total]
    m = float(total / R.size)
    emb = (
        np.stack([backend.embed_word(words.words[k]) for k in selected])
        if backend is not None
        else np.zeros((len(selected), 0))
    )
    return TokenSelection(R, m, selected, emb)


def distillation_tokens(
    image: np.ndarray,
    caption: str | None,
    backend: EmbeddingBackend,
    mode: str = "rw",
    params: RegionParams | None = None,
) -> np.ndarray | None:
    """Word embeddings used as distillation targets, or None to skip the sample.

    ``mode="rw"`` keeps the salient nouns found by region-word matching;
    ``mode="it"`` uses one whole-caption vector (mean over all caption words).
    """
    if not caption or not caption.strip():
        return None
    if mode == "it":
        words = caption_words(caption)
        if not words:
            return None
        return np.mean([backend.embed_word(w) for w in words], axis=0, keepdims=True)
    if mode != "rw":
        raise ValueError(f"unknown matching mode {mode!r}")
    words = segment_text_words(caption)
    if words.N == 0:
        return None
    regions = segment_image_regions(image, params)
    R = region_word_scores(regions, words, backend)
    return select_salient_tokens(R, words, backend).selected_embeddings
