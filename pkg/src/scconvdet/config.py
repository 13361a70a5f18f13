"""Run configuration: one nested YAML/JSON document, overridable per key.

Layout::

    backbone: {stage_widths, strides, insertion_anchor, norm_groups}
    block:    {kind, sru: {...}, cru: {...}, se: {...}}
    train:    {learning_rate, momentum, batch_size, epochs, iou_match_threshold,
               loss_weights: {box, obj, cls}}
    num_classes: 3
    seed: 0

Values resolve as command-line flag, then file, then built-in default.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .blocks import BlockConfig, BlockConfigError
from .loss import LossWeights
from .model import BackboneConfig, ModelConfigError, backbone_from_dict, block_config_from_dict, block_config_to_dict
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_classes: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone),
            "block": block_config_to_dict(self.block),
            "train": asdict(self.train),
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    def validate(self) -> None:
        self.train.validate()
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        self.backbone.validate()
        self.block.validate(self.backbone.anchors()[self.backbone.insertion_anchor])


def default_dict() -> dict:
    return RunConfig().to_dict()


def load_config_file(path) -> dict:
    """Parse a YAML or JSON file into a nested dict (YAML is a JSON superset)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {' '.join(str(exc).split())}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(data).__name__}")
    return data


def _check_keys(data: Mapping, template: Mapping, where: str = "") -> None:
    for key, val in data.items():
        path = f"{where}{key}"
        if key not in template:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(template[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _check_keys(val, template[key], path + ".")


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def resolve(file_data: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, overlaid by ``file_data``, overlaid by dotted-key ``overrides``.

    ``None`` override values mean "flag not given" and are skipped.
    """
    template = default_dict()
    file_data = file_data or {}
    _check_keys(file_data, template)
    merged = _merge(template, file_data)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        probe: dict = {}
        set_dotted(probe, key, val)
        _check_keys(probe, template)
        set_dotted(merged, key, val)
    return from_dict(merged)


def from_dict(d: Mapping) -> RunConfig:
    try:
        tr = dict(d.get("train", {}))
        tr["loss_weights"] = LossWeights(**tr.get("loss_weights", {}))
        cfg = RunConfig(
            backbone=backbone_from_dict(d.get("backbone", {})),
            block=block_config_from_dict(d.get("block", {})),
            train=TrainConfig(**tr),
            num_classes=int(d.get("num_classes", 3)),
            seed=int(d.get("seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    try:
        cfg.validate()
    except (BlockConfigError, ModelConfigError) as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"bad config value type: {exc}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
