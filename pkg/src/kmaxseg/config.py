"""Typed configuration with a flat ``key = value`` text format.

Four sections (model, train, data, infer) cover every tunable in the
package; docs/config.md enumerates them with their defaults. Parsing and
serialization round-trip exactly: parse(serialize(parse(text))) equals
parse(text).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 64
    num_queries: int = 16
    num_classes: int = 4
    image_size: int = 64
    schedule: tuple = (2, 2, 2)
    kernel: str = "kmeans"            # kmeans | softmax
    kmeans_normalize: bool = False
    heads: int = 1
    ffn_hidden: int = 256
    encoder_channels: tuple = (16, 32, 48, 64, 64)
    selfattn_first: bool = True
    share_stage_heads: bool = False
    drop_query: bool = False


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_size: int = 256
    val_size: int = 16
    eval_interval: int = 250
    flip_prob: float = 0.5
    w_pq: float = 3.0
    w_sem: float = 1.0
    w_maskid: float = 0.3
    w_inst: float = 0.0   # reserved slot; the loss itself is out of scope
    w_void: float = 0.1
    w_aux: float = 1.0
    pq_norm: str = "K"    # K | N
    aux_supervision: bool = True


@dataclass
class DataConfig:
    seed: int = 7
    min_shapes: int = 1
    max_shapes: int = 5
    color_jitter: float = 0.08
    min_segment_px: int = 8
    separate_background_classes: bool = False
    threads: int = 1


@dataclass
class InferConfig:
    conf_thresh: float = 0.3
    overlap_thresh: float = 0.8
    mask_binarize: float = 0.5


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self):
        if self.model.kernel not in ("kmeans", "softmax"):
            raise ConfigError(f"model.kernel must be kmeans or softmax, got {self.model.kernel!r}")
        if self.model.image_size % 32:
            raise ConfigError(f"model.image_size must be a multiple of 32, got {self.model.image_size}")
        if len(self.model.encoder_channels) != 5:
            raise ConfigError("model.encoder_channels needs five entries (strides 2..32)")
        if len(self.model.schedule) != 3 or any(s < 1 for s in self.model.schedule):
            raise ConfigError(f"model.schedule needs three positive entries, got {self.model.schedule}")
        if self.model.heads < 1 or self.model.d % self.model.heads:
            raise ConfigError(f"model.heads must divide model.d ({self.model.d})")
        if self.train.pq_norm not in ("K", "N"):
            raise ConfigError(f"train.pq_norm must be K or N, got {self.train.pq_norm!r}")
        if self.train.w_inst != 0.0:
            raise ConfigError("train.w_inst is a reserved slot and must stay 0")
        if not 0.0 <= self.infer.conf_thresh <= 1.0 or not 0.0 <= self.infer.overlap_thresh <= 1.0:
            raise ConfigError("infer thresholds must lie in [0, 1]")
        if self.train.steps < 1 or self.train.train_size < 1 or self.train.val_size < 1:
            raise ConfigError("train.steps, train.train_size and train.val_size must be positive")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "infer": InferConfig}


def _parse_value(raw, kind, key):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    cfg = Config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _parse_value(raw, types[key], f"{section}.{key}"))
    return cfg.validate()


def serialize_config(cfg):
    lines = []
    for section, _ in _SECTIONS.items():
        lines.append(f"[{section}]")
        target = getattr(cfg, section)
        for f in fields(target):
            lines.append(f"{f.name} = {_format_value(getattr(target, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
