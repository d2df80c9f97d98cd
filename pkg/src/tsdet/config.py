"""Experiment configuration: one JSON file plus dot-path overrides.

Sections map onto the component configs (data/train/detector/augment/eval).
Unknown keys are rejected, every range rule is validated before any work
starts, and the effective config is recorded into the run manifest.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

from .augment import AugmentConfig
from .detector import DetectorConfig
from .engine import EngineError, TrainConfig
from .evaluate import EvalConfig
from .losses import MarginLossConfig
from .synth import DatasetError, SceneConfig


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    n_scenes: int = 1000
    labeled_fraction: float = 0.05
    image_size: int = 96
    num_classes: int = 7
    class_weights: tuple = (0.30, 0.17, 0.25, 0.04, 0.06, 0.08, 0.10)
    min_instances: int = 1
    max_instances: int = 4
    min_size: float = 16.0
    max_size: float = 44.0

    def scene_config(self) -> SceneConfig:
        return SceneConfig(num_classes=self.num_classes, image_size=self.image_size,
                           class_weights=tuple(self.class_weights),
                           min_instances=self.min_instances, max_instances=self.max_instances,
                           min_size=self.min_size, max_size=self.max_size)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    out_dir: Optional[str] = None
    data_dir: Optional[str] = None

    def validate(self) -> None:
        try:
            self.train.validate()
            self.data.scene_config().validate()
        except (EngineError, DatasetError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.data.image_size != self.train.detector.image_size:
            raise ConfigError(
                f"data.image_size {self.data.image_size} != detector.image_size "
                f"{self.train.detector.image_size}")
        if self.data.num_classes != self.train.detector.num_classes:
            raise ConfigError(
                f"data.num_classes {self.data.num_classes} != detector.num_classes "
                f"{self.train.detector.num_classes}")
        if not 0.0 < self.data.labeled_fraction <= 1.0:
            raise ConfigError(f"data.labeled_fraction must be in (0,1], got {self.data.labeled_fraction}")


_SECTION_PATHS = {
    "data": ("data",),
    "train": ("train",),
    "detector": ("train", "detector"),
    "augment": ("train", "augment"),
    "margin": ("train", "margin"),
    "eval": ("eval",),
}


def _fill_dataclass(obj, data: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            known = ", ".join(sorted(names))
            raise ConfigError(f"unknown key {path}.{key} (known: {known})")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _fill_dataclass(current, value, f"{path}.{key}")
            continue
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{path}.{key} expects a boolean, got {value!r}")
        if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
            if value != int(value):
                raise ConfigError(f"{path}.{key} expects an integer, got {value!r}")
            value = int(value)
        setattr(obj, key, value)


def _set_dot_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_experiment_config(path: Optional[str] = None,
                           overrides: Optional[list] = None,
                           seed: Optional[int] = None,
                           out_dir: Optional[str] = None) -> ExperimentConfig:
    """Build and validate a config from an optional JSON file plus overrides.

    Overrides are ``section.key=value`` strings (values parsed as JSON,
    falling back to bare strings).  ``seed``/``out_dir`` are the CLI-level
    shortcuts and win over both file and overrides.
    """
    tree: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                tree = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: malformed JSON at offset {e.pos}: {e.msg}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be an object")
    applied = []
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dot_path(tree, key, value)
        applied.append(f"{key}={value!r}")

    cfg = ExperimentConfig()
    top_simple = {"seed", "seeds", "out_dir", "data_dir"}
    for key, value in tree.items():
        if key in _SECTION_PATHS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be an object, got {value!r}")
            target = cfg
            *parents, last = _SECTION_PATHS[key]
            for p in parents:
                target = getattr(target, p)
            _fill_dataclass(getattr(target, last), value, key)
        elif key in top_simple:
            if key == "seeds" and isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)
        else:
            known = ", ".join(sorted(_SECTION_PATHS) + sorted(top_simple))
            raise ConfigError(f"unknown top-level key {key!r} (known: {known})")

    if seed is not None:
        cfg.seed = int(seed)
    if out_dir is not None:
        cfg.out_dir = out_dir
    cfg.train.seed = cfg.seed
    cfg.validate()
    cfg._applied_overrides = applied  # recorded in the manifest for provenance
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def encode(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [encode(v) for v in obj]
        return obj
    return encode(cfg)


def write_manifest(cfg: ExperimentConfig, out_dir: str, extra: Optional[dict] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "config": config_to_dict(cfg),
        "overrides": getattr(cfg, "_applied_overrides", []),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    doc.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return path
