"""Experiment configuration: a YAML tree mapped onto dataclasses.

Precedence is ``--set`` overrides > config file > defaults. Defaults encode
the full-scale protocol; the ``desk`` preset shrinks the networks and the
schedule for CPU runs on the synthetic pair.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .datasets import SETTINGS, ConfigurationError
from .losses import LossWeights
from .metrics import SsimConfig
from .models import ArchConfig

CONFIG_VERSION = 1


@dataclass
class TrainingSchedule:
    epochs: int = 500
    eta_activation_epoch: int = 250
    batch_size: int = 32
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    lr_classifier: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    checkpoint_every: int = 25
    eval_every: int = 25

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.eta_activation_epoch <= self.epochs:
            raise ConfigurationError(
                f"eta_activation_epoch {self.eta_activation_epoch} must lie in [0, epochs={self.epochs}]")
        for name in ("lr_generator", "lr_discriminator", "lr_classifier"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")


@dataclass
class ExperimentConfig:
    setting: str = "synthetic"
    data_root: Optional[str] = None
    texture_dir: Optional[str] = None
    synthetic_n: int = 2000
    synthetic_size: int = 16
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    consistency: str = "class"
    val_size: int = 1000
    output_dir: Optional[str] = None
    seed: int = 0
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigurationError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.consistency not in ("class", "cycle"):
            raise ConfigurationError("consistency must be 'class' or 'cycle'")
        if self.val_size < 1:
            raise ConfigurationError("val_size must be >= 1")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss_weights.eta": 0})``."""
        tree = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(tree, key, _to_plain(value))
        return from_dict(tree)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


_SECTIONS = {"arch": ArchConfig, "loss_weights": LossWeights, "schedule": TrainingSchedule, "ssim": SsimConfig}


def from_dict(tree: dict) -> ExperimentConfig:
    tree = copy.deepcopy(tree or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(tree) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in tree.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            sub_known = {f.name for f in fields(cls)}
            bad = set(value) - sub_known
            if bad:
                raise ConfigurationError(f"unknown keys in {key}: {sorted(bad)}")
            try:
                kwargs[key] = cls.from_dict(value) if hasattr(cls, "from_dict") else cls(**value)
            except TypeError as exc:
                raise ConfigurationError(f"bad section {key}: {exc}") from exc
        else:
            kwargs[key] = value
    if kwargs.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigurationError(f"config_version {kwargs['config_version']} is not supported")
    return ExperimentConfig(**kwargs)


def desk_preset(**overrides) -> ExperimentConfig:
    """Synthetic pair, reduced networks, 50 epochs with the self term from epoch 25."""
    cfg = ExperimentConfig(
        setting="synthetic", synthetic_n=2000, synthetic_size=16,
        arch=ArchConfig.desk(),
        schedule=TrainingSchedule(epochs=50, eta_activation_epoch=25, checkpoint_every=25, eval_every=25),
        val_size=500,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"default": ExperimentConfig, "desk": desk_preset}


def _set_dotted(tree: dict, key: str, value):
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"override {key!r}: {p!r} is not a section")
        node = node[p]
    if parts[-1] not in node and node is tree and parts[-1] not in {f.name for f in fields(ExperimentConfig)}:
        raise ConfigurationError(f"override {key!r}: unknown key")
    node[parts[-1]] = value


def parse_override(text: str):
    """``"a.b=value"`` -> ``("a.b", parsed_value)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {text!r}: {exc}") from exc
    return key.strip(), value


def load_config(path=None, overrides=(), preset="default") -> ExperimentConfig:
    base = PRESETS[preset]() if preset in PRESETS else None
    if base is None:
        raise ConfigurationError(f"unknown preset {preset!r}")
    tree = base.to_dict()
    if path:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigurationError(f"cannot parse {path}{where}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        _merge(tree, loaded)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(tree, key, value)
    return from_dict(tree)


def _merge(base: dict, update: dict):
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path:
        Path(path).write_text(text)
    return text
