"""Run configuration: defaults, validation and the flat YAML file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    image_size: int = 256
    encoder: str = "pyramid-transformer"  # or "tiny-conv"
    encoder_channels: tuple[int, int, int, int] = (64, 128, 320, 512)
    encoder_depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    encoder_heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    sr_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    fed_channels: int = 128
    decoder_channels: int = 128
    head_channels: int = 32
    embed_dim: int = 64
    lambda_attr: float = 1.0
    teacher_forcing: bool = False
    otsu_mix: float = 0.25
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 15
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    refine_iterations: int = 3
    seed: int = 42
    size_thresholds: tuple[float, float] = (0.02, 0.12)
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    rotation_degrees: float = 30.0
    workers: int = 0

    @property
    def t_small(self) -> float:
        return self.size_thresholds[0]

    @property
    def t_large(self) -> float:
        return self.size_thresholds[1]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_TUPLE_FIELDS = {f.name for f in fields(RunConfig) if str(f.type).startswith("tuple")}


def validate_config(raw: RunConfig | Mapping[str, Any] | None = None) -> RunConfig:
    """Fill defaults from a raw mapping (or pass a RunConfig through) and check invariants.

    Raises ConfigError naming the first violated rule.
    """
    if raw is None:
        raw = {}
    if isinstance(raw, RunConfig):
        raw = raw.to_dict()
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for k, v in raw.items():
        if k in _TUPLE_FIELDS:
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{k} must be a list")
            v = tuple(v)
        values[k] = v
    cfg = replace(RunConfig(), **values)

    for name in ("image_size", "fed_channels", "decoder_channels", "head_channels",
                 "embed_dim", "batch_size", "max_epochs"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.image_size % 32:
        raise ConfigError(f"image_size {cfg.image_size} not divisible by 32")
    if cfg.encoder not in ("pyramid-transformer", "tiny-conv"):
        raise ConfigError(f"unknown encoder variant {cfg.encoder!r}")
    for name in ("encoder_channels", "encoder_depths", "encoder_heads", "sr_ratios"):
        seq = getattr(cfg, name)
        if len(seq) != 4 or any(int(x) <= 0 for x in seq):
            raise ConfigError(f"{name} must hold 4 positive integers")
    ch = cfg.encoder_channels
    if not (ch[0] < ch[1] < ch[2] < ch[3]):
        raise ConfigError("encoder_channels must be strictly increasing")
    if any(c % h for c, h in zip(ch, cfg.encoder_heads)):
        raise ConfigError("encoder_channels must be divisible by encoder_heads")
    if cfg.refine_iterations < 1:
        raise ConfigError("refine_iterations must be >= 1")
    if not cfg.learning_rate > 0:
        raise ConfigError("learning_rate must be positive")
    if cfg.lambda_attr < 0:
        raise ConfigError("lambda_attr must be nonnegative")
    if cfg.patience < 0 or cfg.plateau_patience < 0:
        raise ConfigError("patience values must be nonnegative")
    if not 0 < cfg.plateau_factor <= 1:
        raise ConfigError("plateau_factor must lie in (0, 1]")
    if len(cfg.size_thresholds) != 2:
        raise ConfigError("size_thresholds must be (t_small, t_large)")
    t_small, t_large = cfg.size_thresholds
    if not 0 < t_small < t_large < 1:
        raise ConfigError("size_thresholds violate threshold order 0 < t_small < t_large < 1")
    if len(cfg.split_ratios) != 3 or any(r < 0 for r in cfg.split_ratios) \
            or abs(sum(cfg.split_ratios) - 1) > 1e-6:
        raise ConfigError("split_ratios must be 3 nonnegative values summing to 1")
    if not 0 <= cfg.otsu_mix <= 1:
        raise ConfigError("otsu_mix must lie in [0, 1]")
    if cfg.workers < 0:
        raise ConfigError("workers must be nonnegative")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat key: value mapping")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"nested value for {k}; config is flat")
    return validate_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def tiny_config(**overrides: Any) -> RunConfig:
    """Desk-scale preset: ~1M parameters, 64px inputs."""
    base = dict(
        image_size=64,
        encoder="tiny-conv",
        encoder_channels=(16, 32, 64, 128),
        encoder_heads=(1, 1, 2, 4),
        fed_channels=32,
        decoder_channels=32,
        head_channels=16,
        embed_dim=32,
        learning_rate=1e-3,
        batch_size=16,
        max_epochs=40,
    )
    base.update(overrides)
    return validate_config(base)
