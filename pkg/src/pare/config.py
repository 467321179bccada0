"""Run configuration: model shape, training schedule, presets and canonical text form.

Config files are YAML (JSON is accepted, being a YAML subset). The canonical
text form written next to every run and inside checkpoints is JSON with
sorted keys.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Bad or incomplete configuration."""


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (32, 48, 48)
    level_channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 256
    window: tuple[int, int, int] = (8, 8, 8)
    stride: tuple[int, int, int] = (4, 4, 4)
    num_layers: int = 4
    num_heads: int = 8
    mlp_ratio: int = 4
    num_prototypes: int = 40
    # arm switches for the module ablations
    use_segmentation: bool = True
    use_context: bool = True
    use_prototype: bool = True
    classify: bool = True
    seg_classes: str = "all"  # "all" or "nodule" (nodule mask only)
    nodule_position: bool = True

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_prototypes % 2 or self.num_prototypes < 2:
            raise ConfigError(f"num_prototypes must be even and >= 2, got {self.num_prototypes}")
        if self.seg_classes not in ("all", "nodule"):
            raise ConfigError(f"seg_classes must be 'all' or 'nodule', got {self.seg_classes!r}")
        if self.use_context and not self.use_segmentation:
            raise ConfigError("use_context needs use_segmentation (tokens are built from the parsed mask)")
        if self.use_prototype and not self.use_context:
            raise ConfigError("use_prototype needs use_context (CPA consumes the SCA sequence)")
        if not self.classify and not self.use_segmentation:
            raise ConfigError("model with neither segmentation nor classification")
        if not self.classify and (self.use_context or self.use_prototype):
            raise ConfigError("context/prototype stages need classify=true")
        for name in ("num_layers", "num_heads", "mlp_ratio", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def final_head(self) -> str | None:
        if not self.classify:
            return None
        if self.use_prototype:
            return "p1"
        if self.use_context:
            return "p2"
        return "p3"

    @property
    def heads(self) -> tuple[str, ...]:
        if not self.classify:
            return ()
        out = ["p3"]
        if self.use_context:
            out.append("p2")
        if self.use_prototype:
            out.append("p1")
        return tuple(out)


@dataclass
class TrainConfig:
    lam: float = 0.95
    deep_supervision: bool = True
    batch_size: int = 64
    total_iters: int = 10_000
    base_lr: float = 1e-2
    momentum: float = 0.9
    warmup_frac: float = 0.05
    grad_clip: float = 0.0  # 0 disables
    seed: int = 0
    teacher_forcing_prob: float = 0.5
    warmup_W: int = 200
    warmup_buffer: int = 512  # most recent embeddings kept per class for the one-off clustering
    balanced_sampling: bool = True
    augment_flips: bool = False
    checkpoint_every: int = 500
    eval_batch_size: int = 32

    def validate(self) -> None:
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lam must be in (0, 1), got {self.lam}")
        if not 0.0 <= self.teacher_forcing_prob <= 1.0:
            raise ConfigError(f"teacher_forcing_prob must be in [0, 1], got {self.teacher_forcing_prob}")
        for name in ("batch_size", "total_iters", "checkpoint_every", "eval_batch_size", "warmup_buffer"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("base_lr", "momentum", "warmup_frac", "grad_clip", "warmup_W"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Config":
        d = dict(d or {})
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, d.get("model", {}), "model"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
        ).validate()

    def with_overrides(self, overrides: list[str]) -> "Config":
        """Apply ``section.key=value`` overrides (value parsed as YAML)."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not section.key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            if len(parts) != 2 or parts[0] not in d:
                raise ConfigError(f"override key {key!r} must be model.<field> or train.<field>")
            if parts[1] not in d[parts[0]]:
                raise ConfigError(f"unknown field {parts[1]!r} in section {parts[0]!r}")
            d[parts[0]][parts[1]] = yaml.safe_load(raw)
        return Config.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(klass, values: dict[str, Any], section: str):
    values = dict(values or {})
    names = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown field(s) in {section}: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(klass(), k)
        if isinstance(default, tuple):
            v = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{k} must be a boolean, got {v!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            if not isinstance(v, int):
                raise ConfigError(f"{section}.{k} must be an integer, got {v!r}")
        elif isinstance(default, float):
            v = float(v)
        kwargs[k] = v
    return klass(**kwargs)


def clinical_preset() -> Config:
    """Clinical scale: L=4, N=40, D=256, deep supervision, 32x48x48, batch 64, 10K iterations."""
    return Config(ModelConfig(), TrainConfig()).validate()


def desk_preset() -> Config:
    """Laptop-CPU scale: 16x24x24 input, D=64, L=2, N=8, batch 8, 1500 iterations."""
    return Config(
        ModelConfig(
            input_shape=(16, 24, 24),
            level_channels=(4, 8, 16),
            embed_dim=64,
            num_layers=2,
            num_heads=2,
            num_prototypes=8,
        ),
        TrainConfig(batch_size=8, total_iters=1500, checkpoint_every=250),
    ).validate()


def micro_preset() -> Config:
    """Fast-test scale: [8, 16] channels, 16x24x24 input, non-overlapping 8^3 windows (g = 18)."""
    return Config(
        ModelConfig(
            input_shape=(16, 24, 24),
            level_channels=(8, 16),
            embed_dim=16,
            stride=(8, 8, 8),
            num_layers=1,
            num_heads=2,
            num_prototypes=4,
        ),
        TrainConfig(batch_size=4, total_iters=20, warmup_W=5, checkpoint_every=10),
    ).validate()


PRESETS = {"clinical": clinical_preset, "desk": desk_preset, "micro": micro_preset}


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: list[str] | None = None) -> Config:
    """Preset defaults, then the file's values, then command-line overrides.

    A file may name its own base with a top-level ``preset:`` key.
    """
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        preset = data.pop("preset", preset)
    preset = preset or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]().to_dict()
    for section, values in data.items():
        if section not in base:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for k in values:
            if k not in base[section]:
                raise ConfigError(f"unknown field {k!r} in section {section!r}")
        base[section].update(values)
    cfg = Config.from_dict(base)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def config_from_text(text: str) -> Config:
    return Config.from_dict(json.loads(text))
