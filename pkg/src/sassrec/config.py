"""Run configuration: YAML file -> nested dataclasses, unknown keys rejected.

Defaults follow the published settings where they exist (batch 512,
learning rate 0.001, behavior truncation 50); everything else is a
desk-scale default.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import DatasetError, FeatureDims, SyntheticConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class PretrainSection:
    enabled: bool = True
    epochs: int = 1
    temperature: float = 0.1
    batch_size: int = 512
    symmetric: bool = False


@dataclass
class FinetuneSection:
    epochs: int = 1
    beta: float = 1.0
    negatives_per_positive: int = 1
    batch_size: int = 512
    negative_sampling: str = "uniform"


@dataclass
class OptimizerSection:
    learning_rate: float = 0.001
    epsilon: float = 1e-8
    initial_accumulator: float = 0.0


@dataclass
class EvalSection:
    k: int = 20
    split_policy: str = "leave_last_out"
    boundary: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    features: FeatureDims = field(default_factory=FeatureDims)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        self.data.validate()
        checks = [
            (self.pretrain.epochs >= 0, "pretrain.epochs must be >= 0"),
            (self.pretrain.temperature > 0, "pretrain.temperature must be > 0"),
            (self.pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1"),
            (self.finetune.epochs >= 0, "finetune.epochs must be >= 0"),
            (self.finetune.beta >= 0, "finetune.beta must be >= 0"),
            (self.finetune.negatives_per_positive >= 1, "finetune.negatives_per_positive must be >= 1"),
            (self.finetune.batch_size >= 1, "finetune.batch_size must be >= 1"),
            (self.finetune.negative_sampling in ("uniform", "popularity"), "finetune.negative_sampling must be uniform|popularity"),
            (self.optimizer.learning_rate > 0, "optimizer.learning_rate must be > 0"),
            (self.optimizer.epsilon > 0, "optimizer.epsilon must be > 0"),
            (self.eval.k >= 1, "eval.k must be >= 1"),
            (self.eval.split_policy in ("leave_last_out", "temporal"), "eval.split_policy must be leave_last_out|temporal"),
            (self.features.max_len >= 1, "features.max_len must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    hints = {
        "data": SyntheticConfig,
        "features": FeatureDims,
        "model": ModelConfig,
        "pretrain": PretrainSection,
        "finetune": FinetuneSection,
        "optimizer": OptimizerSection,
        "eval": EvalSection,
    }
    for key, value in raw.items():
        sub = hints.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, f"{where}.{key}".strip(".")) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    try:
        cfg.validate()
    except DatasetError as exc:
        raise ConfigError(f"data: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def with_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``{"model.depth": 1}``."""
    raw = copy.deepcopy(cfg.to_dict())
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return config_from_dict(raw)
