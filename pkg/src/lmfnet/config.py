"""Experiment configuration files (YAML with nested sections).

Example::

    ablation_mode: full
    modalities:
      - name: rgb
        source: tiles/{tile}/spectral
        recipe: {kind: spectral_split, bands: rgb, band_stats: dataset}
    encoder: {embed_dims: [8, 16, 24, 32], depths: [1, 1, 1, 1], ...}
    fusion: {n: 4, merge_op: max, ...}
    decoder: {embed_dim: 32, num_classes: 5}
    train: {max_iters: 1000, lr_init: 0.001, ...}
    eval: {patch: 64, stride: 32}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import ModalitySpec, default_modalities
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .model import ModelConfig, parse_ablation_mode
from .training import TrainConfig


@dataclass
class EvalConfig:
    patch: int = 64
    stride: int = 32

    def __post_init__(self):
        if self.patch < 32 or self.patch % 32:
            raise ConfigError(f"eval.patch must be a positive multiple of 32, got {self.patch}")
        if self.stride < 1:
            raise ConfigError("eval.stride must be >= 1")


@dataclass
class ExperimentConfig:
    modalities: list[ModalitySpec] = field(default_factory=default_modalities)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation_mode: str = "full"

    def __post_init__(self):
        if not self.modalities:
            raise ConfigError("at least one modality must be configured")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names {names}")
        parse_ablation_mode(self.ablation_mode, names)

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    def active_modalities(self) -> list[ModalitySpec]:
        active = self.model_config().active_modalities
        return [m for m in self.modalities if m.name in active]

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.modality_names, self.encoder, self.fusion, self.decoder, self.ablation_mode)

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return from_dict({**to_dict(self), "ablation_mode": mode})

    @classmethod
    def tiny(cls, **overrides) -> "ExperimentConfig":
        """Small configuration used by tests and desk-scale experiments."""
        base = dict(
            encoder=EncoderConfig.tiny(),
            fusion=FusionConfig(sr_strides=(4, 2, 1, 1)),
            decoder=DecoderConfig(embed_dim=32),
        )
        base.update(overrides)
        return cls(**base)


_SECTIONS = {
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"modalities", "ablation_mode"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    if "modalities" in raw:
        mods = raw["modalities"]
        if not isinstance(mods, list):
            raise ConfigError("modalities must be a list")
        try:
            kwargs["modalities"] = [ModalitySpec(**m) for m in mods]
        except TypeError as exc:
            raise ConfigError(f"bad modality entry: {exc}") from exc
    kwargs["ablation_mode"] = raw.get("ablation_mode", "full")
    return ExperimentConfig(**kwargs)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {"ablation_mode": cfg.ablation_mode, "modalities": [m.to_dict() for m in cfg.modalities]}
    for name in _SECTIONS:
        out[name] = _plain(asdict(getattr(cfg, name)))
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    return from_dict(raw or {})


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file {p} not found")
    return loads(p.read_text())


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(dumps(cfg))
