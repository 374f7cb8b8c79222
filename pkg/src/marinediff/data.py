"""Synthetic degraded underwater corpus and dataset directory adapters.

Directory layout written by :func:`gen_synthetic` (the ``synthetic`` layout)::

    DIR/images/<id>.png     8-bit RGB
    DIR/masks/<id>.png      8-bit grayscale, foreground 255
    DIR/captions.jsonl      one {"id": ..., "caption": ...} record per line

Masks are binarised at 128 on load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

from .region_word import DISTRACTORS, ORGANISMS

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
# (image subdir, mask subdir) for external corpora; files are paired by stem
LAYOUTS = {
    "synthetic": ("images", "masks"),
    "usod10k": ("RGB", "GT"),
    "suim": ("images", "masks"),
    "ufo120": ("lrd", "mask"),
}

_SALIENT_ADJ = {"fish": "orange", "starfish": "red", "jellyfish": "pink", "crab": "red", "turtle": "green"}
_DISTRACTOR_ADJ = ("dark", "murky", "faint")
_RELATIONS = ("near", "above", "beside", "over", "in front of")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    mask: np.ndarray  # HxW uint8 in {0, 1}
    caption: str | None = None
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetError(f"{self.id}: mask is not binary")


# --- rendering --------------------------------------------------------------


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, angle: float, rng) -> np.ndarray:
    shape = (size, size)
    m = np.zeros(shape, dtype=bool)
    if kind == "fish":
        rr, cc = draw.ellipse(cy, cx, r * 0.5, r, shape=shape, rotation=angle)
        m[rr, cc] = True
        # tail
        tx, ty = cx - r * np.cos(angle), cy + r * np.sin(angle)
        px = [tx, tx - 0.7 * r * np.cos(angle - 0.6), tx - 0.7 * r * np.cos(angle + 0.6)]
        py = [ty, ty + 0.7 * r * np.sin(angle - 0.6), ty + 0.7 * r * np.sin(angle + 0.6)]
        rr, cc = draw.polygon(py, px, shape=shape)
        m[rr, cc] = True
    elif kind == "starfish":
        k = np.arange(10)
        rad = np.where(k % 2 == 0, r, 0.45 * r)
        a = angle + k * np.pi / 5
        rr, cc = draw.polygon(cy + rad * np.sin(a), cx + rad * np.cos(a), shape=shape)
        m[rr, cc] = True
    elif kind == "jellyfish":
        rr, cc = draw.ellipse(cy, cx, r * 0.75, r, shape=shape)
        dome = np.zeros(shape, dtype=bool)
        dome[rr, cc] = True
        dome[int(round(cy)) + 1 :, :] = False
        m |= dome
        for off in np.linspace(-0.6, 0.6, 4):
            rr, cc = draw.line(int(cy), int(cx + off * r), min(size - 1, int(cy + 0.9 * r)), int(cx + off * r * 1.2))
            keep = (cc >= 0) & (cc < size)
            m[rr[keep], cc[keep]] = True
        m = ndimage.binary_dilation(m, iterations=1) if r > 8 else m
    elif kind == "crab":
        rr, cc = draw.ellipse(cy, cx, r * 0.6, r * 0.8, shape=shape, rotation=angle)
        m[rr, cc] = True
        for side in (-1, 1):
            rr, cc = draw.disk((cy - 0.5 * r, cx + side * 0.9 * r), 0.3 * r, shape=shape)
            m[rr, cc] = True
    elif kind == "turtle":
        rr, cc = draw.ellipse(cy, cx, r * 0.7, r, shape=shape, rotation=angle)
        m[rr, cc] = True
        rr, cc = draw.disk((cy - 1.1 * r * np.sin(angle), cx + 1.1 * r * np.cos(angle)), 0.3 * r, shape=shape)
        m[rr, cc] = True
    elif kind == "coral":
        for _ in range(4):
            rr, cc = draw.disk((cy + rng.uniform(-r, r) * 0.6, cx + rng.uniform(-r, r) * 0.6), r * rng.uniform(0.3, 0.6), shape=shape)
            m[rr, cc] = True
    elif kind == "rock":
        rr, cc = draw.ellipse(cy, cx, r * 0.6, r, shape=shape, rotation=angle)
        m[rr, cc] = True
    elif kind == "seaweed":
        for off in (-0.3, 0.0, 0.3):
            rr, cc = draw.line(size - 1, int(np.clip(cx + off * r, 0, size - 1)), int(np.clip(cy - r, 0, size - 1)), int(np.clip(cx + off * r * 2, 0, size - 1)))
            m[rr, cc] = True
        m = ndimage.binary_dilation(m, iterations=1)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _texture(size: int, rng, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return f / (np.abs(f).max() + 1e-9)


@dataclass
class Scene:
    image: np.ndarray  # HxWx3 float32
    mask: np.ndarray  # HxW bool, union of shapes
    salient: list[str]
    distractors: list[str]
    shapes: list[np.ndarray]  # one HxW bool mask per salient object


def render_scene(size: int, rng: np.random.Generator, degrade: bool = True, n_salient: int | None = None) -> Scene:
    """Render one scene: organisms over textured water with distractors, then degrade."""
    yy = np.linspace(0, 1, size)[:, None, None]
    water = np.array([0.10, 0.35, 0.45]) * (1.1 - 0.4 * yy)
    sand = np.array([0.45, 0.42, 0.30])
    sand_w = np.clip((yy - 0.8) * 5, 0, 1)
    img = water * (1 - sand_w) + sand * sand_w
    img = img + 0.06 * _texture(size, rng, size / 12)[..., None] + 0.03 * _texture(size, rng, 2)[..., None]

    distractors = [str(d) for d in rng.choice(sorted(DISTRACTORS), size=rng.integers(1, 3), replace=True)]
    for name in distractors:
        m = _shape_mask(name, size, rng.uniform(0.2, 0.9) * size, rng.uniform(0.1, 0.9) * size,
                        rng.uniform(0.08, 0.16) * size, rng.uniform(0, np.pi), rng)
        img[m] = np.array(DISTRACTORS[name]["color"]) * rng.uniform(0.8, 1.0)

    n = int(n_salient) if n_salient is not None else int(rng.integers(1, 4))
    salient, shapes, mask = [], [], np.zeros((size, size), dtype=bool)
    for _ in range(n):
        name = str(rng.choice(sorted(ORGANISMS)))
        for _attempt in range(10):
            r = rng.uniform(0.09, 0.18) * size
            cy, cx = rng.uniform(r, size - r), rng.uniform(r, size - r)
            m = _shape_mask(name, size, cy, cx, r, rng.uniform(-0.6, 0.6), rng)
            if m.sum() >= 12 and not (ndimage.binary_dilation(m, iterations=2) & mask).any():
                break
        else:
            continue
        shade = 0.85 + 0.15 * _texture(size, rng, 1.5)[..., None]
        color = np.array(ORGANISMS[name]["color"]) * rng.uniform(0.85, 1.0)
        img = np.where(m[..., None], color * shade, img)
        mask |= m
        salient.append(name)
        shapes.append(m)
    if not salient:  # pathological placement; force one small fish in the centre
        m = _shape_mask("fish", size, size / 2, size / 2, 0.12 * size, 0.0, rng)
        img = np.where(m[..., None], np.array(ORGANISMS["fish"]["color"]), img)
        mask |= m
        salient.append("fish")
        shapes.append(m)

    if degrade:
        trans = rng.uniform(0.6, 0.85)
        veil = np.array([0.08, 0.40, 0.50])
        img = img * np.array([0.75, 0.95, 1.0]) * trans + veil * (1 - trans)
        img = ndimage.gaussian_filter(img, sigma=(rng.uniform(0.4, 1.0),) * 2 + (0,))
        c = rng.uniform(0.75, 0.95)
        img = (img - img.mean()) * c + img.mean()
        n_part = int(rng.integers(size * size // 400, size * size // 150 + 1))
        ys, xs = rng.integers(0, size, n_part), rng.integers(0, size, n_part)
        img[ys, xs] += rng.uniform(0.15, 0.35, (n_part, 1))
    return Scene(np.clip(img, 0, 1).astype(np.float32), mask, salient, distractors, shapes)


def _article(word: str) -> str:
    return f"{'an' if word[0] in 'aeiou' else 'a'} {word}"


def make_caption(salient: list[str], distractors: list[str], rng: np.random.Generator) -> str:
    parts = [_article("bright" if i == 0 else _SALIENT_ADJ[s]) + f" {s}" for i, s in enumerate(salient)]
    subject = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    names = list(dict.fromkeys(distractors))
    return f"{subject} {rng.choice(_RELATIONS)} {rng.choice(_DISTRACTOR_ADJ)} {' and '.join(names)}"


def synthetic_samples(count: int, size: int = 64, seed: int = 0, prefix: str = "syn") -> Iterator[Sample]:
    if count < 1 or size % 32:
        raise ValueError("count must be >= 1 and size divisible by 32")
    rng = np.random.default_rng(seed)
    for i in range(count):
        sc = render_scene(size, rng)
        yield Sample(
            f"{prefix}_{i:05d}",
            sc.image,
            sc.mask.astype(np.uint8),
            make_caption(sc.salient, sc.distractors, rng),
            sc.salient + sc.distractors,
        )


# --- IO ---------------------------------------------------------------------


def save_samples(samples, out: str | Path) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out / "images" / f"{s.id}.png")
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(out / "masks" / f"{s.id}.png")
            if s.caption is not None:
                fh.write(json.dumps({"id": s.id, "caption": s.caption}) + "\n")
    return out


def gen_synthetic(out: str | Path, count: int, size: int = 64, seed: int = 0, test_count: int = 0) -> Path:
    """Write ``count`` samples to ``out`` (or ``out/train`` + ``out/test`` when
    ``test_count`` > 0, both drawn from the same seeded stream)."""
    out = Path(out)
    stream = synthetic_samples(count + test_count, size, seed)
    if test_count:
        save_samples((next(stream) for _ in range(count)), out / "train")
        save_samples(stream, out / "test")
    else:
        save_samples(stream, out)
    return out


def read_captions(path: str | Path) -> dict[str, str]:
    caps = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                caps[str(rec["id"])] = str(rec["caption"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{n}: bad caption record") from exc
    return caps


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:  # PIL raises several unrelated types on corrupt files
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def _index(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_dataset(
    root: str | Path,
    layout: str = "synthetic",
    image_dir: str | None = None,
    mask_dir: str | None = None,
    captions: str | Path | None = None,
    require_masks: bool = True,
) -> Iterator[Sample]:
    """Stream samples in sorted id order.

    ``layout`` names a preset from :data:`LAYOUTS` or ``"pairs"`` with explicit
    ``image_dir``/``mask_dir``. Captions come from ``captions.jsonl`` in the root
    (or ``captions``) when present; samples without one carry ``caption=None``.
    """
    root = Path(root)
    if layout == "pairs":
        if not image_dir or not mask_dir:
            raise DatasetError("layout 'pairs' needs image_dir and mask_dir")
        sub_img, sub_mask = image_dir, mask_dir
    elif layout in LAYOUTS:
        sub_img, sub_mask = LAYOUTS[layout]
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    images = _index(root / sub_img)
    masks = _index(root / sub_mask) if (require_masks or (root / sub_mask).is_dir()) else {}
    if require_masks:
        missing = sorted(set(images) - set(masks))
        if missing:
            raise DatasetError(f"missing masks for ids: {', '.join(missing)}")
    cap_path = Path(captions) if captions else root / "captions.jsonl"
    caps = read_captions(cap_path) if cap_path.exists() else {}
    if images and not caps:
        log.warning("%s: no captions found; distillation disabled for these samples", root)
    for sid, ipath in images.items():
        image = load_image(ipath)
        if sid in masks:
            mask = load_mask(masks[sid])
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"{sid}: mask size {mask.shape} != image size {image.shape[:2]}")
        else:
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
        yield Sample(sid, image, mask, caps.get(sid))


def resize_sample(s: Sample, size: int) -> Sample:
    if s.image.shape[:2] == (size, size):
        return s
    img = Image.fromarray(np.round(s.image * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
    m = Image.fromarray(s.mask * 255).resize((size, size), Image.NEAREST)
    return Sample(s.id, np.asarray(img, dtype=np.float32) / 255.0, (np.asarray(m) >= 128).astype(np.uint8), s.caption, s.classes)
