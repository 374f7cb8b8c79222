"""Checkpoint directory: ``manifest.json`` plus one raw little-endian float32 blob.

The manifest records the schema version, step and epoch counters, the full
run config, and the name/shape/byte offset of every parameter. Saving a
loaded checkpoint reproduces both files byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .diffusion_core import MarineSegmenter

SCHEMA_VERSION = 1
FORMAT = "marinediff-checkpoint"
MANIFEST = "manifest.json"
BLOB = "params.f32"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: MarineSegmenter, cfg: RunConfig, step: int = 0, epoch: int = 0) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, t in model.state_dict().items():
            if not t.is_floating_point():
                raise CheckpointError(f"non-float tensor {name} ({t.dtype}) cannot be stored")
            raw = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
            fh.write(raw)
            entries.append(dict(name=name, shape=list(t.shape), offset=offset, nbytes=len(raw)))
            offset += len(raw)
    manifest = dict(
        format=FORMAT,
        schema_version=SCHEMA_VERSION,
        step=int(step),
        epoch=int(epoch),
        dtype="float32",
        byte_order="little",
        config=cfg.to_dict(),
        params=entries,
    )
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise CheckpointError("only little-endian float32 checkpoints are supported")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[MarineSegmenter, RunConfig, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    cfg = RunConfig.from_dict(manifest["config"])
    model = MarineSegmenter(cfg)
    blob = (path / BLOB).read_bytes()
    expected = model.state_dict()
    state = {}
    for e in manifest["params"]:
        name = e["name"]
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name}")
        if list(expected[name].shape) != e["shape"]:
            raise CheckpointError(f"shape mismatch for {name}: {e['shape']} vs {list(expected[name].shape)}")
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated blob at {name}")
        state[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"]))
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, cfg, manifest
