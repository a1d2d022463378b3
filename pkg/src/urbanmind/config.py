"""Experiment configuration: six JSON sections, every field optional.

Unknown keys are rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .errors import InvalidArgument
from .heads import HeadsConfig
from .masking import STRATEGIES
from .muffin_mae import MAEConfig

ABLATIONS = (
    "no_muffin_mae",
    "no_temporal_mask",
    "no_spatial_mask",
    "no_global_mask",
    "no_target_embedding",
    "no_multifaceted_embedding",
    "no_finetuning",
    "no_adaptation",
)


@dataclass
class DataConfig:
    city: str = "synthetic"
    source: str = "synthetic"  # "synthetic" or a city directory written by save_city
    grid_height: int = 20
    grid_width: int = 20
    side: int = 10
    stride: int = 10
    n_days: int = 30
    n_slots: int = 12
    n_channels: int = 3
    task: str = "speed"
    prior_slots: int = 8
    horizon: int = 4
    mode: str = "zero_shot"
    test_fraction: float = 0.25
    train_day_fraction: float = 0.8
    noise: float = 0.05
    coupling: float = 1.0
    lag: int = -2
    event_scale: float = 0.5
    region_phase_spread: float = 0.5
    region_amplitude_spread: float = 0.1
    shift_phase: float = 0.0
    shift_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("standard", "zero_shot"):
            raise InvalidArgument(f"mode must be standard or zero_shot, got {self.mode!r}")
        if self.prior_slots < 1 or self.horizon < 1 or self.prior_slots + self.horizon > self.n_slots:
            raise InvalidArgument("need prior_slots + horizon <= n_slots with both >= 1")


@dataclass
class MAESettings:
    d_v: int = 64
    d_k: int = 32
    conv_widths: tuple[int, ...] = (32, 64)
    activation: str = "gelu"
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    p_s: float = 0.25
    p_t: float = 0.33
    strategies: tuple[str, ...] = STRATEGIES

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        self.strategies = tuple(self.strategies)

    def model_config(self, channels_in: int, embed_dim: int, side: int) -> MAEConfig:
        return MAEConfig(
            channels_in=channels_in,
            embed_dim=embed_dim,
            side=side,
            conv_widths=self.conv_widths,
            activation=self.activation,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            p_s=self.p_s,
            p_t=self.p_t,
            strategies=self.strategies,
        )


@dataclass
class BackboneSettings(BackboneConfig):
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 16

    def model_config(self, l_frozen: int | None = None) -> BackboneConfig:
        fields = {f.name: getattr(self, f.name) for f in dataclasses.fields(BackboneConfig)}
        if l_frozen is not None:
            fields["l_frozen"] = l_frozen
        return BackboneConfig(**fields)


@dataclass
class AdaptationPolicy:
    epochs: int = 20
    lr: float = 5e-4
    p: float = 0.25
    scope: str = "per_region"  # per_region | per_batch
    batch_size: int = 8
    reset: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("adaptation epochs must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise InvalidArgument(f"adaptation mask ratio must be in (0, 1), got {self.p}")
        if self.scope not in ("per_region", "per_batch"):
            raise InvalidArgument(f"unknown adaptation scope {self.scope!r}")


@dataclass
class EvalConfig:
    seed: int = 0
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise InvalidArgument(f"unknown ablation switches {sorted(unknown)}")


SECTIONS = {
    "data": DataConfig,
    "mae": MAESettings,
    "backbone": BackboneSettings,
    "heads": HeadsConfig,
    "tta": AdaptationPolicy,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    mae: MAESettings = field(default_factory=MAESettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    tta: AdaptationPolicy = field(default_factory=AdaptationPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise InvalidArgument(f"unknown config sections {sorted(unknown)}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            values = dict(raw.get(name) or {})
            allowed = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise InvalidArgument(f"unknown keys in [{name}]: {sorted(bad)}")
            sections[name] = section_cls(**values)
        return cls(**sections)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **overrides: dict[str, Any]) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(mae={"p_t": 0.25})``."""
        raw = self.to_dict()
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise InvalidArgument(f"unknown config section {section!r}")
            raw[section].update(values)
        return ExperimentConfig.from_dict(raw)

    @property
    def ablations(self) -> frozenset[str]:
        return frozenset(self.eval.ablations)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise InvalidArgument(f"{path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2))
    return path
