"""Flat ``key=value`` run configuration covering model, training and paths."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .pipeline.train import TrainConfig

PATH_DEFAULTS = {
    "architecture": "convcaps",
    "data": "data/manifest.json",
    "out": "runs/default",
    "overlap": 0.5,
}

DOCS = {
    "architecture": "convcaps | conv_baseline",
    "data": "phantom manifest written by gen-data",
    "out": "output directory for checkpoint, log and figures",
    "overlap": "sliding-window tile overlap fraction for validation/inference",
    "in_channels": "input modalities M",
    "classes": "segmentation classes C including background",
    "visual_channels": "channels of the three dilated 5^3 convolutions",
    "visual_kernel": "kernel extent of the visual feature convolutions",
    "visual_dilations": "dilation rates of the visual feature convolutions",
    "encoder_channels": "channels of the two stride-2 conv encoder stages",
    "encoder_kernel": "kernel extent of the conv encoder",
    "capsule_types": "capsule types of the two intermediate capsule layers",
    "capsule_dims": "pose dimensions of the three capsule layers",
    "capsule_kernel": "kernel extent of the capsule layers",
    "routing_iterations": "dynamic routing iterations",
    "first_capsule_stride": "stride of the first capsule layer",
    "decoder_channels": "channels of the three decoder stages",
    "recon_hidden": "hidden channels of the reconstruction head",
    "margin_weight": "weight of the margin loss",
    "ce_weight": "weight of the cross-entropy loss",
    "reconstruction_weight": "weight of the masked reconstruction loss",
    "patch_size": "training patch extents (multiples of 8)",
    "learning_rate": "initial learning rate",
    "weight_decay": "decoupled L2 weight decay",
    "lr_decay_factor": "learning-rate multiplier on a validation plateau",
    "plateau_patience": "iterations without Dice improvement before decay",
    "early_stop_patience": "iterations without Dice improvement before stopping",
    "improvement_threshold": "minimum absolute Dice gain counted as improvement",
    "val_every": "validation cadence in iterations",
    "max_iterations": "iteration budget",
    "batch_size": "patches per optimizer step",
    "fg_bias": "probability a patch is centred on foreground",
    "seed": "seed for initialization and sampling",
}


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    out = dict(PATH_DEFAULTS)
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            out[f.name] = f.default
    return out


DEFAULTS = _defaults()


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


class RunConfig:
    """Mapping of every known key to a typed value."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{k: self.values[k] for k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: self.values[k] for k in names})
