"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..fusion import MODES, ModelConfig
from ..perturb import Magnitudes, PerturbationTable, get_table
from ..streams import SamplerConfig
from ..synthdata import SynthClass, default_classes

OUTPUT_ENV = "TRISTREAM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    embed_dim: int = 128
    feature_dim: int = 64
    clusters: int = 8
    audio_dim: int = 16
    spatial_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    frame_channels: list[int] = field(default_factory=lambda: [8, 16])
    fusion_jitter: float = 0.1
    context_gate_on: str = "fused"
    multilabel: bool = False
    normalize_streams: bool = True
    temporal_input: str = "standardized"


@dataclass
class SamplerSection:
    sample_count: int = 30
    stride: int = 1
    offset: int = 0


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainingSection:
    epochs: int = 40
    batch_size: int = 16
    patience: int = 5
    pretrain_epochs: int = 4
    warmup_epochs: int = 2


@dataclass
class SeedSection:
    data: int = 0
    init: int = 0
    perturb: int = 0


@dataclass
class DataSection:
    clips_per_class: int = 200
    frames: int = 30
    height: int = 32
    width: int = 32
    splits: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    num_classes: int = 10
    jitter: float = 7.0


@dataclass
class PerturbationSection:
    table: str | dict = "video"
    brightness: float = 0.5
    scale: float = 1.5
    alpha: float = 0.3


@dataclass
class MetricSection:
    k: int = 20


@dataclass
class ExperimentConfig:
    mode: str = "two_stream"
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    data: DataSection = field(default_factory=DataSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    metrics: MetricSection = field(default_factory=MetricSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        d, s, t = self.data, self.sampler, self.training
        if d.frames < 1 or d.frames > 300:
            raise ConfigError("data.frames must be in [1, 300]")
        if d.height % 8 or d.width % 8:
            raise ConfigError("frame height and width must be multiples of 8")
        if len(d.splits) != 3 or abs(sum(d.splits) - 1.0) > 1e-9:
            raise ConfigError("data.splits must be three ratios summing to 1")
        if not 1 <= d.num_classes <= len(default_classes()):
            raise ConfigError(f"data.num_classes must be in [1, {len(default_classes())}]")
        if s.sample_count < 1 or s.stride < 1 or s.offset < 0:
            raise ConfigError("sampler fields must be positive (offset non-negative)")
        if t.batch_size < 1 or t.epochs < 0 or t.patience < 1 or t.pretrain_epochs < 0 \
                or t.warmup_epochs < 0:
            raise ConfigError("invalid training schedule")
        if self.metrics.k < 1:
            raise ConfigError("metrics.k must be positive")
        try:
            self.table()
            self.magnitudes()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def table(self) -> PerturbationTable:
        return get_table(self.perturbation.table)

    def magnitudes(self) -> Magnitudes:
        p = self.perturbation
        if not 0 < p.brightness <= 1 or p.scale <= 1 or not 0 <= p.alpha <= 1:
            raise ConfigError("perturbation magnitudes out of range")
        return Magnitudes(p.brightness, p.scale, p.alpha)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler.sample_count, self.sampler.stride, self.sampler.offset)

    def classes(self) -> list[SynthClass]:
        return default_classes()[: self.data.num_classes]

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            num_classes=self.data.num_classes, embed_dim=m.embed_dim, feature_dim=m.feature_dim,
            clusters=m.clusters, audio_dim=m.audio_dim, image_hw=(self.data.height, self.data.width),
            sampler=self.sampler_config(), spatial_channels=tuple(m.spatial_channels),
            frame_channels=tuple(m.frame_channels), fusion_jitter=m.fusion_jitter,
            multilabel=m.multilabel, context_gate_on=m.context_gate_on,
            normalize_streams=m.normalize_streams, temporal_input=m.temporal_input,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"seeds.init": 3})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return config_from_dict(d)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def dump_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def output_dir(default) -> Path:
    """``$TRISTREAM_OUTPUT_DIR`` if set, else ``default``; created if missing."""
    p = Path(os.environ.get(OUTPUT_ENV) or default)
    p.mkdir(parents=True, exist_ok=True)
    return p
