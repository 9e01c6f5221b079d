"""Run configuration: typed sections merged from a JSON file and flag overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .footskate import CleanupConfig, ContactConfig
from .sampling import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSection:
    classes: tuple[str, ...] = ("walk_forward", "walk_circle", "arm_wave", "squat")
    samples_per_class: int = 64
    length_range: tuple[int, int] = (32, 64)
    fps: float = 20.0
    representation: str = "positions"


@dataclass(frozen=True)
class DenoiserSection:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    kernel_size: int = 3
    groups: int = 8
    attention_heads: int = 4
    dropout: float = 0.1
    text_latent_dim: int = 64
    time_latent_dim: int = 128
    max_tokens: int = 8
    text_layers: int = 4
    text_heads: int = 4
    max_frames: int = 196


@dataclass(frozen=True)
class EvalSection:
    repetitions: int = 20
    encoder_iterations: int = 400
    batch_size: int = 64
    view: str = "ema"


@dataclass(frozen=True)
class InLoopSection:
    last_steps_fraction: float = 0.3
    every_k: int = 1
    iterations: int = 20


SECTIONS = {
    "synth": SynthSection,
    "denoiser": DenoiserSection,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "cleanup": CleanupConfig,
    "contact": ContactConfig,
    "eval": EvalSection,
    "inloop": InLoopSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(ema_beta=0.999))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    cleanup: CleanupConfig = field(default_factory=CleanupConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    inloop: InLoopSection = field(default_factory=InLoopSection)

    def to_json(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(section: str, cls, name: str, value, current):
    hint = {f.name: f for f in dataclasses.fields(cls)}[name]
    try:
        if isinstance(current, tuple):
            return tuple(type(current[0])(v) if current else v for v in value)
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if current is not None and not isinstance(value, type(current)):
            return type(current)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{hint.name}: cannot use {value!r} ({exc})") from exc
    return value


def merge(base: RunConfig, updates: dict) -> RunConfig:
    """Apply nested ``updates``; unknown sections or keys raise ConfigError naming the field."""
    changes = {}
    for key, value in updates.items():
        if key == "seed":
            changes["seed"] = int(value)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        cls = SECTIONS[key]
        current = getattr(base, key)
        names = {f.name for f in dataclasses.fields(cls)}
        fields = {}
        for name, v in value.items():
            if name not in names:
                raise ConfigError(f"unknown config key {key}.{name}")
            fields[name] = _coerce(key, cls, name, v, getattr(current, name))
        try:
            changes[key] = dataclasses.replace(current, **fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {key} config: {exc}") from exc
    return dataclasses.replace(base, **changes)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, data)
    if overrides:
        cfg = merge(cfg, overrides)
    # the top-level seed drives every seeded section
    return merge(cfg, {"train": {"seed": cfg.seed}, "sampler": {"seed": cfg.seed}})
