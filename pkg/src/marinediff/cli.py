"""Command line interface.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, load_config, parse_overrides, toy_config

log = logging.getLogger("marinediff")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _base_config(args) -> RunConfig:
    base = toy_config() if getattr(args, "toy", False) else RunConfig()
    if getattr(args, "config", None):
        base = load_config(args.config, base)
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    for key in ("epochs", "seed"):
        if getattr(args, key, None) is not None:
            pairs[key] = str(getattr(args, key))
    if getattr(args, "no_skd", False):
        pairs["skd"] = "false"
    if getattr(args, "match", None):
        pairs["matching"] = args.match
    return parse_overrides(pairs, base)


def _split_dir(root: Path, name: str) -> Path:
    return root / name if (root / name).is_dir() else root


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic

    gen_synthetic(args.out, args.count, args.size, args.seed, args.test_count)
    print(f"wrote {args.count} samples" + (f" (+{args.test_count} test)" if args.test_count else "") + f" to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .training import Trainer, build_training_set, set_determinism

    cfg = _base_config(args)
    set_determinism(cfg.seed, args.deterministic)
    samples = list(load_dataset(_split_dir(Path(args.data), "train"), args.layout))
    if not samples:
        raise ValueError(f"no samples found in {args.data}")
    trainer = Trainer(cfg)
    trainer.fit(build_training_set(samples, cfg), progress=not args.quiet)
    save_checkpoint(args.out, trainer.model, cfg, trainer.step, trainer.epoch)
    print(f"saved checkpoint to {args.out} (step {trainer.step})")
    return EXIT_OK


def _image_paths(path: Path) -> list[Path]:
    from .data import IMAGE_EXTS

    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not path.exists():
        raise ValueError(f"no such image {path}")
    return [path]


def _save_gray(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_sample(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .data import load_image
    from .metrics import resize_to
    from .sampler import output_mask, sample_masks
    from .schedule import make_linear_schedule
    from .training import set_determinism

    set_determinism(args.seed, args.deterministic)
    model, cfg, _ = load_checkpoint(args.ckpt)
    if args.steps:
        cfg = cfg.replace(S=args.steps)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    src = Path(args.image)
    paths = _image_paths(src)
    out = Path(args.out)
    gen = torch.Generator().manual_seed(args.seed)
    for p in paths:
        img = load_image(p)
        h, w = img.shape[:2]
        small = np.asarray(
            Image.fromarray(np.round(img * 255).astype(np.uint8)).resize((cfg.image_size, cfg.image_size), Image.BILINEAR),
            dtype=np.float32,
        ) / 255.0
        x = torch.from_numpy(small).permute(2, 0, 1)[None].contiguous()
        res = sample_masks(model, x, sched, cfg, gen)[0]
        mask = resize_to(output_mask(res, cfg.cds and not args.no_cds), (h, w))
        target = out / f"{p.stem}.png" if src.is_dir() else out
        _save_gray(mask, target)
        if args.dump_steps:
            for t, pred in zip(res.steps, res.per_step_preds):
                _save_gray(resize_to(pred, (h, w)), Path(args.dump_steps) / f"{p.stem}_t{t:04d}.png")
    print(f"wrote {len(paths)} mask(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import IMAGE_EXTS, load_mask
    from .metrics import evaluate

    def read_dir(d: Path, binary: bool):
        out = {}
        for p in sorted(d.iterdir()):
            if p.suffix.lower() in IMAGE_EXTS:
                if binary:
                    out[p.stem] = load_mask(p)
                else:
                    with Image.open(p) as im:
                        out[p.stem] = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        return out

    gt_dir = Path(args.gt)
    if (gt_dir / "masks").is_dir():
        gt_dir = gt_dir / "masks"
    report = evaluate(read_dir(Path(args.pred), False), read_dir(gt_dir, True))
    print(report.table())
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "mae", "fw", "em", "s"])
            for r in report.per_image:
                w.writerow([r["image_id"], f"{r['mae']:.6f}", f"{r['fw']:.6f}", f"{r['em']:.6f}", f"{r['s']:.6f}"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_report, parse_grid, run_ablation, write_report
    from .data import load_dataset
    from .training import set_determinism

    cfg = _base_config(args)
    set_determinism(cfg.seed, args.deterministic)
    axes = parse_grid(args.grid)
    root = Path(args.data)
    if not (root / "train").is_dir() or not (root / "test").is_dir():
        raise ValueError(f"{root} must contain train/ and test/ splits")
    train = list(load_dataset(root / "train", args.layout))
    test = list(load_dataset(root / "test", args.layout))
    rows = run_ablation(train, test, cfg, axes, seed=cfg.seed)
    write_report(rows, args.out)
    print(format_report(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marinediff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic degraded corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-count", type=int, default=0, help="also write a test split of this size")
    g.set_defaults(func=cmd_gen_data)

    def config_args(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--toy", action="store_true", help="start from the CPU-sized toy defaults")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-skd", action="store_true")
        sp.add_argument("--match", choices=("rw", "it"))
        sp.add_argument("--layout", default="synthetic")
        sp.add_argument("--deterministic", action="store_true")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    config_args(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="predict masks for an image or a directory of images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-cds", action="store_true", help="emit the last-step prediction instead of the fused mask")
    s.add_argument("--dump-steps", metavar="DIR")
    s.add_argument("--steps", type=int, help="override the number of sampling steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score an ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", required=True, help=f"comma-separated axes from {{skd,match,layers,loss,cds}} or 'all'")
    a.add_argument("--out", required=True)
    config_args(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data import DatasetError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:  # includes sampler.NumericalError
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
