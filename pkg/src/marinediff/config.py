"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

LOSS_TERMS = ("consist", "bce", "iou")


@dataclass
class RunConfig:
    # diffusion
    T: int = 1000
    S: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "ddim"  # ddim | posterior
    posterior_mean_convention: str = "cumulative"  # cumulative | ddpm
    clip_x0: bool = True
    logit_scale: float = 8.0
    # losses / fusion
    lam: float = 0.5
    phi: float = 0.5
    binarize: str = "mean"  # mean | global | ensemble
    # architecture
    image_size: int = 256
    widths: tuple[int, ...] = (32, 64, 128, 256)
    heads: int = 2
    cond_width: int = 32
    denoiser_widths: tuple[int, ...] = (32, 64, 128)
    embed_dim: int = 64
    latent_dim: int = 64
    # optimisation
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 10
    batch_size: int = 32
    epochs: int = 150
    grad_clip: float = 1.0
    seed: int = 0
    # ablation axes
    skd: bool = True
    matching: str = "rw"  # rw | it
    cds: bool = True
    layers: tuple[int, ...] = (1, 2, 3, 4)
    loss_terms: tuple[str, ...] = LOSS_TERMS

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.T < 1 or not 1 <= self.S <= self.T:
            errs.append(f"need 1 <= S <= T, got S={self.S}, T={self.T}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            errs.append("beta bounds must satisfy 0 < start <= end < 1")
        if self.image_size % 32:
            errs.append(f"image_size must be divisible by 32, got {self.image_size}")
        if self.matching not in ("rw", "it"):
            errs.append(f"matching must be rw or it, got {self.matching!r}")
        if self.sampler not in ("ddim", "posterior"):
            errs.append(f"sampler must be ddim or posterior, got {self.sampler!r}")
        if self.posterior_mean_convention not in ("cumulative", "ddpm"):
            errs.append("posterior_mean_convention must be cumulative or ddpm")
        if self.binarize not in ("mean", "global", "ensemble"):
            errs.append(f"binarize must be mean, global or ensemble, got {self.binarize!r}")
        if not self.layers or sorted(set(self.layers)) != list(self.layers) or not set(self.layers) <= {1, 2, 3, 4}:
            errs.append(f"layers must be an ascending subset of 1..4, got {self.layers}")
        if not set(self.loss_terms) <= set(LOSS_TERMS) or not self.loss_terms:
            errs.append(f"loss_terms must be a non-empty subset of {LOSS_TERMS}")
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def use_consist(self) -> bool:
        return self.skd and "consist" in self.loss_terms

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for k, v in d.items():
            if k not in hints:
                raise ValueError(f"unknown config key {k!r}")
            kwargs[k] = tuple(v) if hints[k] in (tuple[int, ...], tuple[str, ...]) else v
        return cls(**kwargs)


def toy_config(**overrides) -> RunConfig:
    """CPU-sized defaults used by the test suite and the acceptance run."""
    base = dict(
        image_size=64,
        T=100,
        S=10,
        # betas scaled by 1000/T so that alpha_bar_T is ~0 as with T=1000
        beta_start=1e-3,
        beta_end=0.2,
        epochs=30,
        batch_size=16,
        lr=1e-3,
        seed=7,
    )
    base.update(overrides)
    return RunConfig(**base)


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ == tuple[int, ...]:
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if typ == tuple[str, ...]:
        return tuple(x for x in raw.replace(" ", "").split(",") if x)
    return typ(raw)


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    hints = typing.get_type_hints(RunConfig)
    changes = {}
    for key, raw in pairs.items():
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = _parse_value(raw, hints[key])
    return base.replace(**changes)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v
    return parse_overrides(pairs, base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
