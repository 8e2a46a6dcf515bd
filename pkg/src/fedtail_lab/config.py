"""Experiment configuration: nested JSON with dotted-key overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .data import SynthSpec
from .fedtail import FedTailConfig


class ConfigError(ValueError):
    pass


@dataclass
class SGDConfig:
    lr: Optional[float] = None  # None: 0.01 with SAM-based terms, 0.001 otherwise
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64
    nesterov: bool = False

    def __post_init__(self):
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def resolved_lr(self, cfg: FedTailConfig) -> float:
        if self.lr is not None:
            return self.lr
        sam_based = cfg.active("sharp_er") or cfg.active("classwise")
        return 0.01 if sam_based else 0.001


@dataclass
class ModelDims:
    feature_dims: tuple = (32, 16)
    discriminator_dims: tuple = (16, 16)


@dataclass
class ExperimentSpec:
    data: SynthSpec = field(default_factory=SynthSpec)
    model: ModelDims = field(default_factory=ModelDims)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    fedtail: FedTailConfig = field(default_factory=FedTailConfig)
    rounds: int = 30
    num_seeds: int = 3
    seed: int = 0
    held_out: str = "all"
    train_frac: float = 0.9
    data_files: Optional[list] = None
    uniform_fedavg: bool = False
    checkpoint_every: int = 0
    threads: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        if "cls" not in self.fedtail.terms:
            raise ValueError("the enabled loss terms must include 'cls'")
        if self.held_out != "all" and self.data_files is None and self.held_out not in self.data.names():
            raise ValueError(f"held_out {self.held_out!r} is not a domain name")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"data": SynthSpec, "model": ModelDims, "sgd": SGDConfig, "fedtail": FedTailConfig}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b=value`` to a nested dict; the value is JSON if it parses, else a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form KEY=VALUE")
    key, text = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty key in override {assignment!r}")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r} descends into a non-section")
    node[parts[-1]] = _parse_value(text)


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if isinstance(v, list) and k not in ("data_files", "terms"):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def spec_from_dict(raw: dict) -> ExperimentSpec:
    raw = copy.deepcopy(raw)
    top = {}
    for k, v in raw.items():
        if k in _SECTIONS:
            top[k] = _build(_SECTIONS[k], v, k)
        else:
            top[k] = v
    return _build(ExperimentSpec, top, "experiment")


def load_config(path, overrides=(), seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for ov in overrides:
        apply_override(raw, ov)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return spec_from_dict(raw)
