"""Detection decoding, greedy NMS and end-to-end inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np

from ..numkit import row_softmax
from ..sct import SctParams, build_contextual_fields, sct_forward
from .anchors import decode_boxes, iou_matrix
from .model import BACKGROUND, DetectorModel, backbone_forward, heads_forward, split_background


class Detection(NamedTuple):
    class_id: int
    confidence: float
    box: Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax, normalized
    image_id: Union[int, str, None] = None


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.45
    score_threshold: float = 0.01
    top_k: int = 200


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Equal scores keep input order. A box is suppressed when its IoU with a
    kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlap = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlap <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def class_scores(image, model: DetectorModel, sct: Optional[SctParams] = None):
    """Per-anchor class confidences and decoded boxes for one image.

    Without ``sct`` the scores are the detector's own source-class
    probabilities. With ``sct`` they are target-class probabilities from the
    transformer, scaled by the detector's objectness ``1 - p(background)``.
    """
    feats = backbone_forward(image, model)
    heads = heads_forward(feats, model)
    boxes = decode_boxes(model.anchors.boxes, heads.deltas)
    probs = row_softmax(heads.logits)
    if sct is None:
        return np.delete(probs, BACKGROUND, axis=1), boxes
    prior, _ = split_background(heads.logits, model)
    fields = build_contextual_fields(prior, feats, sct.kernels, sct.feature_scales)
    y_hat, _ = sct_forward(prior.scores, fields, sct)
    objectness = 1.0 - probs[:, BACKGROUND]
    return objectness[:, None] * y_hat, boxes


def select_detections(scores: np.ndarray, boxes: np.ndarray, cfg: NmsConfig = NmsConfig(),
                      image_id=None) -> List[Detection]:
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    found = []
    for c in range(scores.shape[1]):
        idx = np.flatnonzero(valid & (scores[:, c] > cfg.score_threshold))
        if idx.size == 0:
            continue
        for i in idx[nms(boxes[idx], scores[idx, c], cfg.iou_threshold)]:
            found.append(Detection(c, float(scores[i, c]), tuple(float(v) for v in boxes[i]), image_id))
    found.sort(key=lambda d: -d.confidence)
    return found[: cfg.top_k]


def infer(model: DetectorModel, image, sct: Optional[SctParams] = None,
          nms_cfg: NmsConfig = NmsConfig(), image_id=None) -> List[Detection]:
    scores, boxes = class_scores(image, model, sct)
    return select_detections(scores, boxes, nms_cfg, image_id)
