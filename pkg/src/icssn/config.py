"""Configuration sections and TOML loading.

The config file has one table per section: ``[data]``, ``[encoder]``,
``[classifier]``, ``[segmentation]``, ``[socl]`` and ``[training]``.
Missing keys fall back to the defaults below; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


AUGMENT_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class DataConfig:
    tile_size: int = 512
    resolution_m: float = 2.0
    split_ratios: tuple = (6, 2, 2)
    augment_ops: tuple = AUGMENT_OPS
    equalize: bool = True
    workers: int = 4

    def validate(self):
        if self.tile_size <= 0 or self.tile_size % 8:
            raise ConfigError("tile_size must be a positive multiple of 8")
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or sum(self.split_ratios) <= 0:
            raise ConfigError("split_ratios must be three nonnegative numbers")
        for op in self.augment_ops:
            if op not in AUGMENT_OPS:
                raise ConfigError(f"unknown augmentation op {op!r}")


@dataclass
class SynthConfig:
    tile_size: int = 128
    n_landslide: int = 60
    n_slope: int = 20
    blobs_per_tile: tuple = (1, 2)
    blob_radius: tuple = (14, 34)
    horseshoe_prob: float = 0.5
    texture_contrast: float = 22.0
    boundary_contrast: float = 45.0
    rim_width: int = 3
    noise_sigma: float = 18.0

    def validate(self):
        if self.tile_size <= 0 or self.tile_size % 8:
            raise ConfigError("tile_size must be a positive multiple of 8")
        if self.n_landslide < 0 or self.n_slope < 0:
            raise ConfigError("sample counts must be nonnegative")
        lo, hi = self.blob_radius
        if lo <= 0 or hi < lo:
            raise ConfigError("blob_radius must be a positive (min, max) pair")
        if 2 * hi >= self.tile_size:
            raise ConfigError(
                f"blob diameter {2 * hi} does not fit in a {self.tile_size}px tile")
        bmin, bmax = self.blobs_per_tile
        if bmin < 1 or bmax < bmin:
            raise ConfigError("blobs_per_tile must be a (min, max) pair with min >= 1")
        if self.rim_width < 1:
            raise ConfigError("rim_width must be >= 1")


@dataclass
class EncoderConfig:
    backbone_depth: int = 101
    # stem width; 64 is the standard ResNet, smaller values give desk-scale models
    base_width: int = 64
    output_channels: int = 256
    aspp_dilations: tuple = (1, 6, 12, 18)
    se_reduction: int = 16
    pretrained: bool = False

    def validate(self):
        if self.backbone_depth not in (18, 50, 101):
            raise ConfigError("backbone_depth must be one of 18, 50, 101")
        if self.output_channels <= 0:
            raise ConfigError("output_channels must be positive")
        if self.base_width <= 0:
            raise ConfigError("base_width must be positive")
        d = list(self.aspp_dilations)
        if not d or min(d) <= 0 or len(set(d)) != len(d):
            raise ConfigError("aspp_dilations must be positive and distinct")
        if self.se_reduction <= 0 or self.output_channels % self.se_reduction:
            raise ConfigError("se_reduction must divide output_channels")


@dataclass
class ClassifierConfig:
    hidden_units: int = 256
    pooling: str = "max"
    fc_layers: int = 2
    # "joint": one 4-way softmax over LL/LS/SL/SS; "binary": one sigmoid per slot
    head: str = "joint"

    def validate(self):
        if self.fc_layers < 1:
            raise ConfigError("fc_layers must be >= 1")
        if self.pooling not in ("max", "avg"):
            raise ConfigError("pooling must be 'max' or 'avg'")
        if self.head not in ("joint", "binary"):
            raise ConfigError("head must be 'joint' or 'binary'")


@dataclass
class SegmentationConfig:
    decoder_dropout: float = 0.1
    landslide_hit_threshold: int = 400
    slope_fp_threshold: int = 100

    def validate(self):
        if not 0.0 <= self.decoder_dropout < 1.0:
            raise ConfigError("decoder_dropout must lie in [0, 1)")
        if self.landslide_hit_threshold <= 0 or self.slope_fp_threshold <= 0:
            raise ConfigError("object-rule thresholds must be positive")


@dataclass
class SoclConfig:
    lam: float = 0.1
    tau: float = 0.1
    n_pos: int = 64
    n_neg: int = 64
    strategy: str = "edge"
    block: int = 8
    lo: int = 7
    hi: int = 57

    def validate(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ConfigError("n_pos and n_neg must be >= 1")
        if self.strategy not in ("edge", "center", "hybrid"):
            raise ConfigError("strategy must be edge, center or hybrid")
        if not 0 <= self.lo <= self.hi <= self.block * self.block:
            raise ConfigError("need 0 <= lo <= hi <= block*block")


@dataclass
class TrainingConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_classification: float = 0.001
    lr_segmentation: float = 0.007
    weight_decay: float = 0.0005
    batch_size: int = 4
    workers: int = 4
    schedule: str = "cosine"
    epochs_classification: int = 50
    epochs_segmentation: int = 100
    warmup_epochs: int = 10
    max_rounds: int = 3
    patience: int = 8
    min_delta: float = 1e-4
    seed: int = 0
    device: str = "cpu"

    def validate(self):
        if self.optimizer != "sgd":
            raise ConfigError("only the 'sgd' optimizer is supported")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        if min(self.lr_classification, self.lr_segmentation) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "classifier": ClassifierConfig,
    "segmentation": SegmentationConfig,
    "socl": SoclConfig,
    "training": TrainingConfig,
}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    socl: SoclConfig = field(default_factory=SoclConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw):
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {name: _section(SECTIONS[name], raw.get(name, {})) for name in SECTIONS}
        return cls(**parts).validate()


def _section(kind, values):
    names = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys for [{kind.__name__}]: {sorted(unknown)}")
    kwargs = {}
    for key, value in values.items():
        if isinstance(names[key].default, tuple):
            value = tuple(value)
        kwargs[key] = value
    return kind(**kwargs)


def synth_config_from_dict(raw):
    cfg = _section(SynthConfig, raw.get("synth", raw))
    cfg.validate()
    return cfg


def load_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config(path=None):
    if path is None:
        return Config().validate()
    raw = load_toml(path)
    raw.pop("synth", None)
    return Config.from_dict(raw)


def dump_toml(cfg):
    """Render a Config (or any section dict) as TOML text."""
    data = cfg.to_dict() if isinstance(cfg, Config) else cfg
    lines = []
    for section, values in data.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg, path):
    Path(path).write_text(dump_toml(cfg))
