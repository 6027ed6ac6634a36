"""Experiment configuration: one YAML file, named presets, dotted CLI overrides.

Schema (all sections optional except ``seed``)::

    preset: toy            # vod | tj4d | toy
    seed: 0                # mandatory
    data:
      path: null           # dataset directory; null means synthesize in memory
      frames: 50
      schema: vod          # vod | tj4d (radar extras layout)
      scene: {}            # SceneConfig field overrides, e.g. {dropout: 0.2}
    model: {}              # ModelConfig field overrides, e.g. {use_uff: false}
    train:
      steps: 2000
      batch_size: 2
      lr: 0.001
      deterministic: true
      grad_clip: 10.0
      weights: {cls: 1.0, reg: 2.0, dir: 0.2, depth: 0.05}
    eval:
      roi: none            # none | vod-corridor
      iou_mode: 3d         # 3d | bev
      ap_points: 40        # 40 | 11
      iou_thresholds: {}   # per-class overrides
      score_thr: 0.1
      nms_iou: 0.1
      max_dets: 50
    output_dir: runs
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .detection import LossWeights
from .evaluation import VOD_CORRIDOR, EvalConfig
from .model import ModelConfig
from .pipeline import TrainConfig, config_hash
from .rdl import ConfigError
from .synth import SceneConfig, default_classes

__all__ = ["ExperimentConfig", "PRESETS", "ROI_CHOICES", "parse_override"]

PRESETS = ("vod", "tj4d", "toy")
ROI_CHOICES = {"none": None, "vod-corridor": VOD_CORRIDOR}

_DEFAULTS: dict[str, Any] = {
    "preset": "toy",
    "seed": None,
    "data": {"path": None, "frames": 50, "schema": "vod", "scene": {}},
    "model": {},
    "train": {"steps": 2000, "batch_size": 2, "lr": 1e-3, "deterministic": True, "grad_clip": 10.0,
              "weights": {"cls": 1.0, "reg": 2.0, "dir": 0.2, "depth": 0.05}},
    "eval": {"roi": "none", "iou_mode": "3d", "ap_points": 40, "iou_thresholds": {},
             "score_thr": 0.1, "nms_iou": 0.1, "max_dets": 50},
    "output_dir": "runs",
}
# sections whose keys are free-form overrides of another dataclass
_OPEN = {"data.scene", "model", "eval.iou_thresholds"}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``5e-4`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                 |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                 |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                 |[-+]?\.(?:inf|Inf|INF)
                 |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _merge(base: dict, upd: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        key = f"{prefix}{k}"
        if prefix.rstrip(".") not in _OPEN and k not in base:
            raise ConfigError(f"unknown config field {key!r}")
        if isinstance(v, dict) and isinstance(out.get(k), dict) and key not in _OPEN:
            out[k] = _merge(out[k], v, key + ".")
        elif isinstance(v, dict) and key in _OPEN:
            out[k] = {**out.get(k, {}), **v}
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``"train.steps=500"`` -> ``("train.steps", 500)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.load(raw, Loader=_Loader)


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``to_dict`` round-trips through YAML."""

    values: dict = field(default_factory=lambda: copy.deepcopy(_DEFAULTS))

    def __post_init__(self):
        self.values = _merge(_DEFAULTS, self.values)
        self.validate()

    # construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return cls(dict(d or {}))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = yaml.load(Path(path).read_text(), Loader=_Loader)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        if d is not None and not isinstance(d, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(d)

    def override(self, **dotted) -> "ExperimentConfig":
        """Copy with ``{"train.steps": 10}``-style overrides applied; None values are skipped."""
        upd: dict = {}
        for key, value in dotted.items():
            if value is None:
                continue
            node = upd
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return ExperimentConfig(_merge(self.values, upd))

    # validation -----------------------------------------------------------

    def validate(self):
        v = self.values
        if v["preset"] not in PRESETS:
            raise ConfigError(f"preset: expected one of {PRESETS}, got {v['preset']!r}")
        if v["seed"] is None:
            raise ConfigError("seed: a seed is mandatory")
        if not isinstance(v["seed"], int) or isinstance(v["seed"], bool) or v["seed"] < 0:
            raise ConfigError(f"seed: expected a non-negative integer, got {v['seed']!r}")
        if v["data"]["schema"] not in ("vod", "tj4d"):
            raise ConfigError(f"data.schema: expected vod or tj4d, got {v['data']['schema']!r}")
        if not isinstance(v["data"]["frames"], int) or v["data"]["frames"] < 1:
            raise ConfigError("data.frames: expected a positive integer")
        t = v["train"]
        if not isinstance(t["steps"], int) or t["steps"] < 0:
            raise ConfigError("train.steps: expected a non-negative integer")
        if not isinstance(t["batch_size"], int) or t["batch_size"] < 1:
            raise ConfigError("train.batch_size: expected a positive integer")
        if not (isinstance(t["lr"], (int, float)) and t["lr"] > 0):
            raise ConfigError("train.lr: expected a positive number")
        unknown = set(t["weights"]) - {"cls", "reg", "dir", "depth"}
        if unknown:
            raise ConfigError(f"train.weights: unknown loss terms {sorted(unknown)}")
        if v["eval"]["roi"] not in ROI_CHOICES:
            raise ConfigError(f"eval.roi: expected one of {list(ROI_CHOICES)}")
        # build the derived objects once so field errors surface here
        for name, build in (("data.scene", self.scene_config), ("model", self.model_config),
                            ("eval", self.eval_config)):
            try:
                build()
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{name}: {e}") from None

    # derived objects ------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def preset(self) -> str:
        return self.values["preset"]

    @property
    def schema(self) -> str:
        if self.preset in ("vod", "tj4d"):
            return self.preset
        return self.values["data"]["schema"]

    def scene_config(self) -> SceneConfig:
        scene = dict(self.values["data"]["scene"])
        scene = {k: tuple(x) if isinstance(x, list) else x for k, x in scene.items()}
        return SceneConfig(schema=self.schema, classes=default_classes(self.schema),
                           seed=self.seed, **scene)

    def model_config(self) -> ModelConfig:
        base = ModelConfig.preset(self.preset, default_classes(self.schema), schema=self.schema)
        d = base.to_dict()
        for k, x in self.values["model"].items():
            if k not in d:
                raise ConfigError(f"model.{k}: unknown model field")
            d[k] = x
        return ModelConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        t = dict(self.values["train"])
        weights = LossWeights(**t.pop("weights"))
        return TrainConfig(seed=self.seed, weights=weights, **t)

    def eval_config(self, class_names: tuple[str, ...] | None = None) -> EvalConfig:
        e = self.values["eval"]
        names = class_names or tuple(c.name for c in default_classes(self.schema))
        return EvalConfig(names, dict(e["iou_thresholds"]), ROI_CHOICES[e["roi"]], e["ap_points"],
                          e["iou_mode"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @property
    def hash(self) -> str:
        return config_hash(self.values)
