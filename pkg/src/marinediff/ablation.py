"""Component ablation grid over distillation, matching, aggregation depth, loss
terms and fusion. Identical training configs are trained once and shared."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Sample, resize_sample
from .metrics import evaluate
from .training import Trainer, build_training_set, image_tensor, predict

log = logging.getLogger(__name__)

AXES = ("skd", "match", "layers", "loss", "cds")


@dataclass
class Variant:
    axis: str
    name: str
    changes: dict


def axis_variants(axis: str) -> list[Variant]:
    if axis == "skd":
        return [Variant(axis, "w/o SKD", dict(skd=False)), Variant(axis, "w/ SKD", dict(skd=True))]
    if axis == "match":
        return [Variant(axis, "I-T", dict(matching="it")), Variant(axis, "R-W", dict(matching="rw"))]
    if axis == "layers":
        return [Variant(axis, "+".join(f"F{i}" for i in range(1, n + 1)), dict(layers=tuple(range(1, n + 1)))) for n in range(1, 5)]
    if axis == "loss":
        combos = [("consist",), ("bce", "iou"), ("consist", "iou"), ("consist", "bce"), ("consist", "bce", "iou")]
        return [Variant(axis, "+".join(c), dict(loss_terms=c)) for c in combos]
    if axis == "cds":
        return [Variant(axis, "w/o CDS", dict(cds=False)), Variant(axis, "w/ CDS", dict(cds=True))]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def parse_grid(spec: str) -> list[str]:
    axes = [a.strip() for a in spec.split(",") if a.strip()]
    if axes == ["all"]:
        return list(AXES)
    for a in axes:
        axis_variants(a)
    if not axes:
        raise ValueError("empty ablation grid")
    return axes


def _train_key(cfg: RunConfig) -> tuple:
    d = cfg.to_dict()
    d.pop("cds")
    if not cfg.use_consist:
        d["matching"] = None
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items()))


def run_ablation(
    train: Sequence[Sample],
    test: Sequence[Sample],
    base: RunConfig,
    axes: Sequence[str],
    seed: int = 0,
) -> list[dict]:
    test = [resize_sample(s, base.image_size) for s in test]
    images = image_tensor(test)
    gts = {s.id: s.mask for s in test}
    models: dict[tuple, object] = {}
    rows = []
    for axis in axes:
        for v in axis_variants(axis):
            cfg = base.replace(**v.changes)
            row = dict(axis=axis, variant=v.name)
            try:
                key = _train_key(cfg)
                if key not in models:
                    log.info("training variant %s/%s", axis, v.name)
                    trainer = Trainer(cfg)
                    trainer.fit(build_training_set(train, cfg))
                    models[key] = trainer.model
                model = models[key]
                res = predict(model, images, cfg, seed=seed)
                preds = {s.id: (r.fused if cfg.cds else r.final) for s, r in zip(test, res)}
                row.update(evaluate(preds, gts).row())
                row["params"] = sum(p.numel() for p in model.parameters())
                row["error"] = ""
            except Exception as exc:  # one failed row must not stop the grid
                log.exception("variant %s/%s failed", axis, v.name)
                row.update(fw=np.nan, em=np.nan, s=np.nan, mae=np.nan, params=0, error=repr(exc))
            rows.append(row)
    return rows


def write_report(rows: list[dict], path: str | Path) -> None:
    cols = ["axis", "variant", "fw", "em", "s", "mae", "params", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})


def format_report(rows: list[dict]) -> str:
    lines = [f"{'axis':<7} {'variant':<20} {'F^w':>7} {'E^m':>7} {'S':>7} {'MAE':>8} {'params':>9}"]
    for r in rows:
        lines.append(f"{r['axis']:<7} {r['variant']:<20} {r['fw']:7.4f} {r['em']:7.4f} {r['s']:7.4f} {r['mae']:8.4f} {r['params']:9d}")
    return "\n".join(lines)
