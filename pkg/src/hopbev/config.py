"""Run configuration: one JSON document validated against the published
schema (schema/train_config.schema.json), with defaults applied in code.

Unknown keys are rejected by the schema. The fully resolved document is
echoed into run directories, checkpoints, and dataset manifests so every
artifact is regenerable from (config echo, seed).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import torch

from .bevnet import BEVGridSpec
from .errors import ConfigError
from .hop import HopConfig
from .synthworld import WorldConfig

# Desk-scale defaults. The reference training recipe upstream uses lr 2e-4
# and weight decay 0.01 at 200x200; the desk values below are tuned for a
# 64x64 grid on a CPU and recorded in every artifact.
DEFAULTS = {
    "seed": 0,
    "grid": {"h": 64, "w": 64, "extent": 32.0},
    "world": {
        "n_frames": 6,
        "dt": 0.5,
        "extent": 32.0,
        "n_objects": [2, 6],
        "object_speed": [0.0, 3.0],
        "ego_speed": [0.0, 3.0],
        "ego_turn_rate": [-0.3, 0.3],
        "n_classes": 3,
        "box_wl": [1.2, 4.0],
        "box_h": [1.0, 2.5],
        "z_range": [0.2, 1.6],
        "z_norm": 3.0,
        "process_noise": 0.0,
        "dropout": 0.15,
        "n_sequences": 232,
    },
    "model": {
        "channels": 64,
        "encoder_layers": 4,
        "n_heads": 4,
        "n_points": 4,
        "offset_scale": 2.0,
        "reduction_ratio": 4,
        "history_length": 4,
        "head": "center",
        "n_queries": 32,
        "query_decoder_layers": 2,
    },
    "hop": {
        "enabled": True,
        "k": 1,
        "detach_policy": "full_detach",
        "aux_loss_weight": 1.0,
        "feature_loss_weight": 1.0,
        "target_mode": "objects",
        "use_short_term": True,
        "use_long_term": True,
        "aux_head": "center",
    },
    "query_fusion": {"form": "none"},
    "train": {
        "lr": 1e-3,
        "weight_decay": 0.01,
        "steps": 2000,
        "batch_size": 1,
        "warmup_steps": 100,
        "grad_clip": 10.0,
        "eval_every": 200,
        "eval_holdout": 32,
        "log_every": 10,
        "dtype": "float32",
    },
    "decode": {"score_thresh": 0.1, "max_det": 24},
}


def _schema():
    with resources.files("hopbev.schema").joinpath("train_config.schema.json").open("r") as f:
        return json.load(f)


def validate_config_dict(doc: dict):
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message} at {'/'.join(str(p) for p in e.absolute_path)}") from e


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    """Resolved configuration for one run."""

    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        validate_config_dict(doc)
        cfg = cls(doc=_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(doc)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides ({'hop.k': 2}) and revalidate."""
        doc = copy.deepcopy(self.doc)
        for dotted, value in overrides.items():
            node = doc
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        validate_config_dict(doc)
        cfg = RunConfig(doc=doc)
        cfg.validate()
        return cfg

    # Section accessors -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def grid(self) -> BEVGridSpec:
        g = self.doc["grid"]
        return BEVGridSpec(H=g["h"], W=g["w"], extent=g["extent"])

    def world(self) -> WorldConfig:
        return WorldConfig.from_dict(self.doc["world"])

    def hop(self) -> HopConfig:
        h = self.doc["hop"]
        return HopConfig(
            enabled=h["enabled"],
            k=h["k"],
            n_history=self.doc["model"]["history_length"],
            detach_policy=h["detach_policy"],
            aux_loss_weight=h["aux_loss_weight"],
            feature_loss_weight=h["feature_loss_weight"],
            target_mode=h["target_mode"],
            use_short_term=h["use_short_term"],
            use_long_term=h["use_long_term"],
            aux_head=h["aux_head"],
        )

    @property
    def model(self) -> dict:
        return self.doc["model"]

    @property
    def train(self) -> dict:
        return self.doc["train"]

    @property
    def decode(self) -> dict:
        return self.doc["decode"]

    @property
    def fusion_form(self) -> str:
        return self.doc["query_fusion"]["form"]

    @property
    def dtype(self):
        return torch.float64 if self.doc["train"]["dtype"] == "float64" else torch.float32

    def validate(self):
        g = self.doc["grid"]
        if g["h"] != g["w"]:
            raise ConfigError(f"grid must be square, got {g['h']}x{g['w']}")
        if abs(self.doc["world"]["extent"] - g["extent"]) > 1e-9:
            raise ConfigError("world.extent must equal grid.extent")
        self.world()
        m = self.doc["model"]
        if m["channels"] % m["n_heads"] != 0:
            raise ConfigError("model.channels must be divisible by model.n_heads")
        if m["channels"] % m["reduction_ratio"] != 0:
            raise ConfigError("model.channels must be divisible by model.reduction_ratio")
        hop = self.doc["hop"]
        if hop["enabled"]:
            self.hop().validate()
            window = m["history_length"] + (2 if hop["k"] == -1 else 1)
            if self.doc["world"]["n_frames"] < window:
                raise ConfigError(
                    f"world.n_frames={self.doc['world']['n_frames']} too short for "
                    f"history_length={m['history_length']} with k={hop['k']}"
                )
        else:
            if self.doc["world"]["n_frames"] < m["history_length"] + 1:
                raise ConfigError("world.n_frames must cover history_length + 1")
        if self.fusion_form != "none" and m["head"] != "query":
            raise ConfigError("query fusion requires model.head == 'query'")
        if self.train["eval_holdout"] >= self.doc["world"]["n_sequences"]:
            raise ConfigError("eval_holdout must leave at least one training sequence")
        return self

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.doc, f, indent=2, sort_keys=True)
