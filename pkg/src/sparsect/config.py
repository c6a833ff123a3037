"""Run configuration: one JSON document with data/anchors/sct/train/eval sections."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional

from .data.synthetic import SyntheticConfig
from .detector.anchors import AnchorConfig
from .detector.inference import NmsConfig
from .detector.training import DESK_FINETUNE, DESK_PRETRAIN, Schedule

SECTIONS = ("data", "anchors", "sct", "train", "eval")

DEFAULT_CONFIG = {
    "data": {
        "image_side": 64,
        "objects_per_scene": [1, 3],
        "object_size": [10, 30],
        "noise_sigma": 0.05,
        "clutter_density": 2.0,
        "split": 1,
        "n_source": 400,
        "n_target_pool": 150,
        "n_test": 80,
    },
    "anchors": {
        "grid_sizes": [8, 4, 2, 1],
        "aspect_ratios": [1.0, 2.0, 0.5],
        "box_size_range": [0.2, 0.9],
        "channels": 16,
    },
    "sct": {
        "lam": 0.6,
        "tau": None,
        "focus": "attention",
        "kernels": [2],
        "feature_scales": None,
        "focus_norm": True,
    },
    "train": {
        "pretrain": DESK_PRETRAIN.to_dict(),
        "finetune": DESK_FINETUNE.to_dict(),
        "shots": 1,
        "train_heads": False,
    },
    "eval": {
        "iou_threshold": 0.5,
        "nms_iou": 0.45,
        "score_threshold": 0.01,
        "top_k": 200,
    },
}


class ConfigError(ValueError):
    pass


def merge(base: Mapping, override: Mapping, path: str = "") -> dict:
    """Recursive dict merge; keys in ``override`` must already exist in ``base``."""
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: Optional[Mapping] = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = merge(cfg, doc)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: Mapping) -> None:
    try:
        synthetic_config(cfg)
        anchor_config(cfg)
        schedule(cfg, "pretrain")
        schedule(cfg, "finetune")
        nms_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    d, s, t = cfg["data"], cfg["sct"], cfg["train"]
    if d["split"] not in (1, 2, 3):
        raise ConfigError("data.split must be 1, 2 or 3")
    for key in ("n_source", "n_target_pool", "n_test"):
        if not isinstance(d[key], int) or d[key] < 1:
            raise ConfigError(f"data.{key} must be a positive integer")
    if s["lam"] < 0 or (s["tau"] is not None and s["tau"] < 0):
        raise ConfigError("sct.lam and sct.tau must be nonnegative")
    if s["focus"] not in ("attention", "gap"):
        raise ConfigError("sct.focus must be 'attention' or 'gap'")
    if t["shots"] not in (1, 2, 3, 5, 10):
        raise ConfigError("train.shots must be one of 1, 2, 3, 5, 10")
    if not 0 < cfg["eval"]["iou_threshold"] <= 1:
        raise ConfigError("eval.iou_threshold must lie in (0, 1]")


def canonical_json(cfg: Any) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Any) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def synthetic_config(cfg: Mapping) -> SyntheticConfig:
    d = cfg["data"]
    return SyntheticConfig(image_side=d["image_side"], objects_per_scene=tuple(d["objects_per_scene"]),
                           object_size=tuple(d["object_size"]), noise_sigma=d["noise_sigma"],
                           clutter_density=d["clutter_density"])


def anchor_config(cfg: Mapping) -> AnchorConfig:
    a = cfg["anchors"]
    return AnchorConfig(tuple(a["grid_sizes"]), tuple(a["aspect_ratios"]), tuple(a["box_size_range"]))


def schedule(cfg: Mapping, phase: str) -> Schedule:
    d = dict(cfg["train"][phase])
    d["milestones"] = tuple(d.get("milestones", ()))
    out = Schedule(**d)
    if out.iterations < 0 or out.batch_size < 1 or out.learning_rate < 0:
        raise ValueError(f"train.{phase}: iterations >= 0, batch_size >= 1, learning_rate >= 0 required")
    return out


def nms_config(cfg: Mapping) -> NmsConfig:
    e = cfg["eval"]
    return NmsConfig(e["nms_iou"], e["score_threshold"], e["top_k"])


def feature_dim(cfg: Mapping) -> int:
    """``D_f`` for the default choice of feature scales (the first four)."""
    a, s = cfg["anchors"], cfg["sct"]
    n = len(a["grid_sizes"])
    scales = s["feature_scales"] if s["feature_scales"] is not None else range(min(4, n))
    return a["channels"] * len(list(scales))
