"""JSON checkpoints for the detector and the transformer parameters.

Arrays are stored as ``{"shape": [...], "data": [...]}`` with Python float
repr, which round-trips float64 exactly, so a save/load cycle is lossless
and identical parameters always serialize to identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .detector.anchors import AnchorConfig
from .detector.model import DetectorModel
from .numkit import LinearMap
from .sct import EMBEDDINGS, SctParams

CHECKPOINT_FORMAT = "sparsect-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """The checkpoint is unreadable or does not match the expected configuration."""


@dataclass
class Checkpoint:
    detector: Optional[DetectorModel] = None
    sct: Optional[SctParams] = None
    meta: dict = field(default_factory=dict)


def _encode(arrays: Dict[str, np.ndarray]) -> dict:
    return {name: {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a).reshape(-1)]}
            for name, a in sorted(arrays.items())}


def _decode(block: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in block["shape"])
        data = np.asarray(block["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"array {name!r} is malformed: {exc}") from None
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"array {name!r}: header shape {shape} but {data.size} values")
    if not np.all(np.isfinite(data)):
        raise CheckpointError(f"array {name!r} holds non-finite values")
    return data.reshape(shape)


def _detector_header(model: DetectorModel) -> dict:
    cfg = model.anchor_cfg
    return {"grid_sizes": list(cfg.scale_grid_sizes), "aspect_ratios": list(cfg.aspect_ratios),
            "box_size_range": list(cfg.box_size_range), "n_classes": model.n_classes,
            "image_side": model.image_side, "channels": model.channels}


def dumps_checkpoint(detector: Optional[DetectorModel] = None, sct: Optional[SctParams] = None,
                     meta: Optional[dict] = None) -> str:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}}
    if detector is not None:
        doc["detector"] = {"config": _detector_header(detector), "arrays": _encode(detector.arrays())}
    if sct is not None:
        doc["sct"] = {"config": {"d_f": sct.d_f, "c_s": sct.c_s, "c_t": sct.c_t, **sct.hyperparams()},
                      "arrays": _encode(sct.arrays())}
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(path, detector: Optional[DetectorModel] = None, sct: Optional[SctParams] = None,
                    meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_text(dumps_checkpoint(detector, sct, meta), encoding="utf-8")
    return path


def _fill(arrays: Dict[str, np.ndarray], stored: dict, what: str) -> None:
    missing = sorted(set(arrays) - set(stored))
    extra = sorted(set(stored) - set(arrays))
    if missing or extra:
        raise CheckpointError(f"{what} arrays mismatch: missing {missing}, unexpected {extra}")
    for name, target in arrays.items():
        value = _decode(stored[name], name)
        if value.shape != target.shape:
            raise CheckpointError(f"{what} array {name!r} has shape {value.shape}, expected {target.shape}")
        target[...] = value


def _load_detector(block: dict) -> DetectorModel:
    c = block["config"]
    cfg = AnchorConfig(tuple(c["grid_sizes"]), tuple(c["aspect_ratios"]), tuple(c["box_size_range"]))
    model = DetectorModel.init(cfg, c["n_classes"], np.random.default_rng(0),
                               image_side=c["image_side"], channels=tuple(c["channels"]))
    _fill(model.arrays(), block["arrays"], "detector")
    return model


def _load_sct(block: dict) -> SctParams:
    c = block["config"]
    fs = c["feature_scales"]
    params = SctParams.init(c["d_f"], c["c_s"], c["c_t"], np.random.default_rng(0), lam=c["lam"],
                            tau=c["tau"], focus=c["focus"], kernels=tuple(c["kernels"]),
                            feature_scales=None if fs is None else tuple(fs), focus_norm=c["focus_norm"])
    _fill(params.arrays(), block["arrays"], "sct")
    return params


def loads_checkpoint(text: str, expect_anchors: Optional[AnchorConfig] = None,
                     expect_classes: Optional[int] = None) -> Checkpoint:
    """Parse a checkpoint, optionally checking it against the current configuration."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a JSON checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a sparsect checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        detector = _load_detector(doc["detector"]) if "detector" in doc else None
        sct = _load_sct(doc["sct"]) if "sct" in doc else None
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint is missing a field: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    if detector is not None:
        if expect_anchors is not None and detector.anchor_cfg != expect_anchors:
            raise CheckpointError(f"checkpoint anchors {detector.anchor_cfg} differ from config {expect_anchors}")
        if expect_classes is not None and detector.n_classes != expect_classes:
            raise CheckpointError(f"checkpoint has {detector.n_classes} source classes, config implies {expect_classes}")
        if sct is not None and sct.c_s != detector.n_classes:
            raise CheckpointError("transformer C_s differs from the detector's class count")
    return Checkpoint(detector, sct, doc.get("meta", {}))


def load_checkpoint(path, **expect) -> Checkpoint:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads_checkpoint(text, **expect)
