"""Run configuration: dataclasses plus the flat key-value config file.

The on-disk format is a flat YAML mapping with dotted keys, e.g.::

    schedule.kind: cosine
    schedule.T: 1000
    diffusion.parameterization: z0
    train.batch_size: 64

Any subset of keys may be given; the rest keep their defaults. CLI flags
override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from trajdiff.errors import DataError
from trajdiff.schedules import NoiseSchedule, make_schedule


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s: float | None = None  # falls back to the per-kind default

    def build(self) -> NoiseSchedule:
        if self.kind == "linear":
            return make_schedule("linear", self.T, beta_start=self.beta_start, beta_end=self.beta_end)
        kwargs = {} if self.s is None else {"s": self.s}
        return make_schedule(self.kind, self.T, **kwargs)


# Frozen so instances are hashable and can key caches of jit-compiled closures.
@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    time_dim: int = 256
    n_heads: int = 4
    n_blocks: int = 1
    hidden_in: tuple[int, ...] = (256, 256)
    hidden_time: tuple[int, ...] = (256, 256)
    hidden_out: tuple[int, ...] = (512, 512)
    ffn_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden_in", tuple(self.hidden_in))
        object.__setattr__(self, "hidden_time", tuple(self.hidden_time))
        object.__setattr__(self, "hidden_out", tuple(self.hidden_out))
        if self.embed_dim % self.n_heads != 0:
            raise DataError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )


@dataclass(frozen=True)
class DiffusionConfig:
    parameterization: str = "z0"  # {"z0", "eps"}
    self_conditioning: bool = True
    guidance_w: float = 0.0
    p_disc: float = 0.2
    mask_prefix_frac: float = 0.25
    mask_random_frac: float = 0.25

    def __post_init__(self):
        if self.parameterization not in ("z0", "eps"):
            raise DataError(f"parameterization must be 'z0' or 'eps', got {self.parameterization!r}")
        if not 0.0 <= self.p_disc <= 1.0:
            raise DataError(f"p_disc must be in [0, 1], got {self.p_disc}")
        for name in ("mask_prefix_frac", "mask_random_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {v}")
        if self.mask_prefix_frac + self.mask_random_frac > 1.0:
            raise DataError("mask_prefix_frac + mask_random_frac must not exceed 1")
        if self.guidance_w < -1.0:
            raise DataError(f"guidance_w must be >= -1, got {self.guidance_w}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 10_000
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    adam_b1: float = 0.9
    adam_b2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-8
    val_fraction: float = 0.05
    rng_seed: int = 0
    eval_every: int = 200
    patience: int = 5
    min_rel_improvement: float = 1e-3
    val_mc: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_end <= self.lr_start:
            raise DataError(f"need 0 < lr_end <= lr_start, got ({self.lr_start}, {self.lr_end})")
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.total_steps < 1:
            raise DataError(f"total_steps must be >= 1, got {self.total_steps}")


@dataclass
class DataConfig:
    seq_len: int = 32
    n_locations: int | None = None  # filled in from the data when training


@dataclass
class RunConfig:
    """Everything a training or sampling run needs, in one place."""

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "diffusion": DiffusionConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def config_from_flat(flat: dict) -> RunConfig:
    """Build a RunConfig from a flat {"section.key": value} mapping."""
    per_section: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        if "." not in key:
            raise DataError(f"config key {key!r} is not of the form section.key")
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise DataError(f"unknown config section {section!r} in key {key!r}")
        fields = {f.name for f in dataclasses.fields(_SECTIONS[section])}
        if name not in fields:
            raise DataError(f"unknown config key {key!r}")
        per_section[section][name] = value
    try:
        return RunConfig(**{sec: cls(**per_section[sec]) for sec, cls in _SECTIONS.items()})
    except TypeError as exc:
        raise DataError(f"bad config value: {exc}") from exc


def config_to_flat(cfg: RunConfig) -> dict:
    """Inverse of :func:`config_from_flat`; tuples become lists for YAML."""
    flat = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section}.{f.name}"] = value
    return flat


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise DataError(f"config file {path} must contain a flat mapping")
    return config_from_flat(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_flat(cfg), sort_keys=True))
