"""Saliency evaluation measures: MAE, weighted F-measure, max E-measure, S-measure.

``pred`` is a float map in [0, 1] and ``gt`` a binary map of the same shape.
Conventions follow the widely used MATLAB reference code, with three
documented changes: nearest-foreground ties in the weighted F-measure go to
the smallest row-major index, the E-measure averages over all ``n`` pixels
(not ``n - 1``) so a perfect map scores exactly 1, and E-measure thresholds
are strict (``pred > k/256`` for k = 0..255).

The ``*_reference`` functions are literal loop implementations kept for
cross-checking the vectorised versions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

EPS = float(np.finfo(np.float64).eps)
N_THRESHOLDS = 256
BRUTE_FORCE_PAIRS = 1 << 21


class EmptyGroundTruth(ValueError):
    pass


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.abs(pred - gt).mean())


# --- weighted F-measure -----------------------------------------------------


@lru_cache(maxsize=8)
def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < EPS * h.max()] = 0
    h = h / h.sum()
    h.setflags(write=False)
    return h


def nearest_foreground(gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and flat index of the nearest foreground pixel, per pixel.

    Ties go to the smallest row-major index.
    """
    fg = np.argwhere(gt)  # row-major order
    h, w = gt.shape
    pts = np.indices((h, w)).reshape(2, -1).T
    if len(pts) * len(fg) <= BRUTE_FORCE_PAIRS:
        d2 = ((pts[:, None, :] - fg[None, :, :]) ** 2).sum(axis=-1)
        best = d2.argmin(axis=1)  # first minimum = smallest row-major index
        flat = fg[best, 0] * w + fg[best, 1]
        return np.sqrt(d2[np.arange(len(pts)), best]).reshape(h, w), flat.reshape(h, w)
    k = min(8, len(fg))
    tree = cKDTree(fg)
    while True:
        d, i = tree.query(pts, k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        if k == len(fg) or not (d[:, -1] == d[:, 0]).any():
            break
        k = min(len(fg), 4 * k)
    best = np.where(d == d[:, :1], i, len(fg)).min(axis=1)
    flat = fg[best, 0] * w + fg[best, 1]
    return d[:, 0].reshape(h, w), flat.reshape(h, w)


def weighted_fmeasure(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prep(pred, gt)
    if not gt.any():
        raise EmptyGroundTruth("weighted F-measure is undefined for an empty ground truth")
    E = np.abs(pred - gt)
    dist, idx = nearest_foreground(gt)
    Et = np.where(gt, E, E.ravel()[idx])
    EA = ndimage.correlate(Et, gaussian_kernel(), mode="constant", cval=0.0)
    min_e_ea = np.where(gt & (EA < E), EA, E)
    B = np.where(gt, 1.0, 2.0 - np.exp(math.log(0.5) / 5.0 * dist))
    Ew = min_e_ea * B
    TPw = gt.sum() - Ew[gt].sum()
    FPw = Ew[~gt].sum()
    R = 1.0 - Ew[gt].mean()
    P = TPw / (EPS + TPw + FPw)
    return float((1.0 + beta2) * R * P / (EPS + R + beta2 * P))


def weighted_fmeasure_reference(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prep(pred, gt)
    H, W = gt.shape
    fg = [(i, j) for i in range(H) for j in range(W) if gt[i, j]]
    if not fg:
        raise EmptyGroundTruth("empty ground truth")
    E = [[abs(float(pred[i, j]) - float(gt[i, j])) for j in range(W)] for i in range(H)]
    Et = [[0.0] * W for _ in range(H)]
    D = [[0.0] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            if gt[i, j]:
                Et[i][j] = E[i][j]
                continue
            best, bd = None, None
            for (a, b) in fg:  # row-major scan, strict < keeps the first tie
                d2 = (a - i) ** 2 + (b - j) ** 2
                if bd is None or d2 < bd:
                    best, bd = (a, b), d2
            Et[i][j] = E[best[0]][best[1]]
            D[i][j] = math.sqrt(bd)
    sigma, r = 5.0, 3
    K = [[math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-r, r + 1)] for y in range(-r, r + 1)]
    ks = sum(map(sum, K))
    K = [[v / ks for v in row] for row in K]
    tp_loss = fp = gt_loss = 0.0
    n_fg = 0
    for i in range(H):
        for j in range(W):
            ea = 0.0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    if 0 <= i + u < H and 0 <= j + v < W:
                        ea += K[u + r][v + r] * Et[i + u][j + v]
            if gt[i, j]:
                ew = min(E[i][j], ea)
                gt_loss += ew
                n_fg += 1
            else:
                ew = E[i][j] * (2.0 - math.exp(math.log(0.5) / 5.0 * D[i][j]))
                fp += ew
    TPw = n_fg - gt_loss
    R = 1.0 - gt_loss / n_fg
    P = TPw / (EPS + TPw + fp)
    return (1.0 + beta2) * R * P / (EPS + R + beta2 * P)


# --- E-measure --------------------------------------------------------------


def _enhanced(f, g, mu_f, mu_g):
    a_f = f - mu_f
    a_g = g - mu_g
    align = 2.0 * a_f * a_g / (a_f * a_f + a_g * a_g + EPS)
    return (align + 1.0) ** 2 / 4.0


def e_measure_curve(pred, gt) -> np.ndarray:
    """E-measure of ``pred > k/256`` for k = 0..255."""
    pred, gt = _prep(pred, gt)
    n = gt.size
    n_fg = int(gt.sum())
    # pred > k/256  <=>  k < ceil(256 * pred); the scaling by 256 is exact
    levels = np.clip(np.ceil(pred * N_THRESHOLDS), 0, N_THRESHOLDS).astype(np.int64)
    ks = np.arange(N_THRESHOLDS)

    def passing(sel):
        hist = np.bincount(levels[sel], minlength=N_THRESHOLDS + 1)
        return hist[::-1].cumsum()[::-1][1:][ks]  # count with level > k

    tp = passing(gt).astype(np.float64)
    fp = passing(~gt).astype(np.float64)
    if n_fg == 0:
        return (n - fp) / n
    if n_fg == n:
        return tp / n
    fn = n_fg - tp
    tn = (n - n_fg) - fp
    mu_f = (tp + fp) / n
    mu_g = n_fg / n
    total = (
        tp * _enhanced(1.0, 1.0, mu_f, mu_g)
        + fp * _enhanced(1.0, 0.0, mu_f, mu_g)
        + fn * _enhanced(0.0, 1.0, mu_f, mu_g)
        + tn * _enhanced(0.0, 0.0, mu_f, mu_g)
    )
    return total / n


def e_measure_max(pred, gt) -> float:
    return float(e_measure_curve(pred, gt).max())


def e_measure_max_reference(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    H, W = gt.shape
    n = H * W
    g = [[1.0 if gt[i, j] else 0.0 for j in range(W)] for i in range(H)]
    n_fg = sum(map(sum, g))
    best = -1.0
    for k in range(N_THRESHOLDS):
        thr = k / 256
        fm = [[1.0 if pred[i, j] > thr else 0.0 for j in range(W)] for i in range(H)]
        if n_fg == 0:
            enh = [[1.0 - fm[i][j] for j in range(W)] for i in range(H)]
        elif n_fg == n:
            enh = fm
        else:
            mu_f = sum(map(sum, fm)) / n
            mu_g = n_fg / n
            enh = [[0.0] * W for _ in range(H)]
            for i in range(H):
                for j in range(W):
                    af, ag = fm[i][j] - mu_f, g[i][j] - mu_g
                    al = 2 * af * ag / (af * af + ag * ag + EPS)
                    enh[i][j] = (al + 1) ** 2 / 4
        best = max(best, sum(map(sum, enh)) / n)
    return best


# --- S-measure --------------------------------------------------------------


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based (X, Y) centroid, rounded half away from zero."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_away(w / 2), _round_half_away(h / 2)
    X = _round_half_away(float((gt.sum(axis=0) * np.arange(1, w + 1)).sum() / total))
    Y = _round_half_away(float((gt.sum(axis=1) * np.arange(1, h + 1)).sum() / total))
    return X, Y


def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    N = p.size
    if N == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (N - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (N - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (N - 1 + EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    o_fg = _object_score(pred[gt])
    o_bg = _object_score(1.0 - pred[~gt])
    return float(u * o_fg + (1 - u) * o_bg)


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    X, Y = centroid(gt)
    area = h * w
    w1 = X * Y / area
    w2 = (w - X) * Y / area
    w3 = X * (h - Y) / area
    w4 = 1.0 - w1 - w2 - w3
    g = gt.astype(np.float64)
    blocks = [(slice(0, Y), slice(0, X)), (slice(0, Y), slice(X, w)), (slice(Y, h), slice(0, X)), (slice(Y, h), slice(X, w))]
    return float(sum(wk * _ssim(pred[b], g[b]) for wk, b in zip((w1, w2, w3, w4), blocks)))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    return max(0.0, alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt))


def s_measure_reference(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    H, W = gt.shape
    P = [[float(pred[i, j]) for j in range(W)] for i in range(H)]
    G = [[1.0 if gt[i, j] else 0.0 for j in range(W)] for i in range(H)]
    n = H * W
    total = sum(map(sum, G))
    if total == 0:
        return 1.0 - sum(map(sum, P)) / n
    if total == n:
        return sum(map(sum, P)) / n

    def obj(vals):
        m = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        return 2.0 * m / (m * m + 1.0 + sd + EPS)

    fg_vals = [P[i][j] for i in range(H) for j in range(W) if G[i][j]]
    bg_vals = [1.0 - P[i][j] for i in range(H) for j in range(W) if not G[i][j]]
    u = total / n
    so = u * obj(fg_vals) + (1 - u) * obj(bg_vals)

    X = math.floor(sum(G[i][j] * (j + 1) for i in range(H) for j in range(W)) / total + 0.5)
    Y = math.floor(sum(G[i][j] * (i + 1) for i in range(H) for j in range(W)) / total + 0.5)

    def ssim(r0, r1, c0, c1):
        ps = [P[i][j] for i in range(r0, r1) for j in range(c0, c1)]
        gs = [G[i][j] for i in range(r0, r1) for j in range(c0, c1)]
        N = len(ps)
        if N == 0:
            return 0.0
        x, y = sum(ps) / N, sum(gs) / N
        sx = sum((a - x) ** 2 for a in ps) / (N - 1 + EPS)
        sy = sum((b - y) ** 2 for b in gs) / (N - 1 + EPS)
        sxy = sum((a - x) * (b - y) for a, b in zip(ps, gs)) / (N - 1 + EPS)
        al = 4 * x * y * sxy
        be = (x * x + y * y) * (sx + sy)
        if al != 0:
            return al / (be + EPS)
        return 1.0 if be == 0 else 0.0

    w1 = X * Y / n
    w2 = (W - X) * Y / n
    w3 = X * (H - Y) / n
    w4 = 1.0 - w1 - w2 - w3
    sr = w1 * ssim(0, Y, 0, X) + w2 * ssim(0, Y, X, W) + w3 * ssim(Y, H, 0, X) + w4 * ssim(Y, H, X, W)
    return max(0.0, alpha * so + (1 - alpha) * sr)


# --- reports ----------------------------------------------------------------


@dataclass
class MetricReport:
    f_beta_w: float
    e_phi_m: float
    s_alpha: float
    mae: float
    per_image: list[dict] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return dict(fw=self.f_beta_w, em=self.e_phi_m, s=self.s_alpha, mae=self.mae)

    def table(self) -> str:
        head = f"{'F^w_beta':>9} {'E^m_phi':>9} {'S_alpha':>9} {'MAE':>9}"
        vals = f"{self.f_beta_w:9.4f} {self.e_phi_m:9.4f} {self.s_alpha:9.4f} {self.mae:9.4f}"
        tail = f"\n({len(self.per_image)} images, {len(self.excluded)} empty-GT excluded)"
        return head + "\n" + vals + tail


def resize_to(pred: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if pred.shape == tuple(shape):
        return pred
    from PIL import Image

    im = Image.fromarray(pred.astype(np.float32), mode="F").resize((shape[1], shape[0]), Image.BILINEAR)
    return np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)


def evaluate_image(pred, gt) -> dict:
    pred, gt = _prep(resize_to(np.asarray(pred, dtype=np.float64), np.asarray(gt).shape), gt)
    return dict(mae=mae(pred, gt), fw=weighted_fmeasure(pred, gt), em=e_measure_max(pred, gt), s=s_measure(pred, gt))


def evaluate(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray]) -> MetricReport:
    """Mean metrics over ids present in both maps; empty-GT images are excluded."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ValueError(f"no prediction for ids: {', '.join(missing[:10])}")
    per, excluded = [], []
    for sid in sorted(gts):
        gt = np.asarray(gts[sid]).astype(bool)
        if not gt.any():
            excluded.append(sid)
            continue
        per.append(dict(image_id=sid, **evaluate_image(preds[sid], gt)))
    if excluded:
        log.warning("excluded %d empty-GT images: %s", len(excluded), ", ".join(excluded[:10]))
    if not per:
        raise EmptyGroundTruth("every ground truth is empty")
    mean = {k: float(np.mean([r[k] for r in per])) for k in ("fw", "em", "s", "mae")}
    return MetricReport(mean["fw"], mean["em"], mean["s"], mean["mae"], per, excluded)
