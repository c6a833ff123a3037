"""End-to-end steps shared by the command line and the experiments."""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as config_mod
from .data.synthetic import Scene, generate_scenes, split_classes
from .detector.inference import Detection, NmsConfig, infer
from .detector.model import DetectorModel
from .detector.training import AblationFlags
from .metrics import evaluate
from .sct import SctParams


def synthesize(cfg: dict, seed: int) -> Tuple[Dict[str, List[Scene]], dict]:
    """Source, target-pool and test scenes plus manifest metadata."""
    syn = config_mod.synthetic_config(cfg)
    d = cfg["data"]
    source, target = split_classes(syn.categories, d["split"])
    s_src, s_tgt, s_test = np.random.SeedSequence(seed).spawn(3)
    subsets = {
        "source": generate_scenes(syn, source, d["n_source"], s_src),
        "target": generate_scenes(syn, target, d["n_target_pool"], s_tgt),
        "test": generate_scenes(syn, target, d["n_test"], s_test),
    }
    meta = {"config": syn.to_dict(), "split": d["split"], "seed": seed,
            "source_classes": source, "target_classes": target, "class_names": syn.names}
    return subsets, meta


def local_truths(scenes: Sequence, classes: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per-image ``(labels, boxes)`` with global category ids remapped to ``0..len(classes)-1``.

    ``scenes`` holds :class:`Scene` objects or raw truth lists.
    """
    index = {int(c): i for i, c in enumerate(classes)}
    out = []
    for s in scenes:
        truths = s.truths if isinstance(s, Scene) else s
        for c, _ in truths:
            if int(c) not in index:
                raise ValueError(f"category {c} is not among {list(classes)}")
        labels = np.asarray([index[int(c)] for c, _ in truths], dtype=np.int64)
        boxes = np.asarray([b for _, b in truths], dtype=np.float64).reshape(-1, 4)
        out.append((labels, boxes))
    return out


def init_detector(cfg: dict, n_classes: int, rng: np.random.Generator) -> DetectorModel:
    return DetectorModel.init(config_mod.anchor_config(cfg), n_classes, rng,
                              image_side=cfg["data"]["image_side"], channels=(cfg["anchors"]["channels"],))


def init_sct(cfg: dict, model: DetectorModel, c_t: int, rng: np.random.Generator) -> SctParams:
    s = cfg["sct"]
    fs = s["feature_scales"]
    scales = fs if fs is not None else range(min(4, len(model.channels)))
    d_f = sum(model.channels[k] for k in scales)
    return SctParams.init(d_f, model.n_classes, c_t, rng, lam=s["lam"], tau=s["tau"], focus=s["focus"],
                          kernels=tuple(s["kernels"]), feature_scales=None if fs is None else tuple(fs),
                          focus_norm=s["focus_norm"])


def ablation_flags(cfg: dict, context: bool = True, sparse: bool = True) -> AblationFlags:
    return AblationFlags(context=context, sparse=sparse, gap=cfg["sct"]["focus"] == "gap",
                         train_heads=cfg["train"]["train_heads"])


def detect_scenes(model: DetectorModel, sct: Optional[SctParams], images: Sequence[np.ndarray],
                  image_ids: Sequence, nms_cfg: NmsConfig = NmsConfig()) -> List[Detection]:
    out = []
    for img, image_id in zip(images, image_ids):
        out.extend(infer(model, img, sct, nms_cfg, image_id=image_id))
    return out


def truth_items(truths: Sequence[Tuple[np.ndarray, np.ndarray]], image_ids: Sequence):
    return [(image_id, int(c), tuple(float(v) for v in b), False)
            for image_id, (labels, boxes) in zip(image_ids, truths) for c, b in zip(labels, boxes)]


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def clean_report(rep: dict) -> dict:
    """Replace NaN (no scorable class) by ``None`` so the report is valid JSON."""
    return {k: ({c: _clean(x) for c, x in v.items()} if isinstance(v, dict) else _clean(v))
            for k, v in rep.items()}


def score(detections: Sequence[Detection], truths, image_ids, iou_threshold: float = 0.5) -> dict:
    return clean_report(evaluate(detections, truth_items(truths, image_ids), iou_threshold))
