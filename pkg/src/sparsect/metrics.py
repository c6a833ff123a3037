"""IoU, greedy detection matching and VOC/COCO-style average precision."""
from __future__ import annotations

import math
from collections import defaultdict
from typing import Dict, Hashable, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

TP, FP, IGNORED = 1, 0, -1
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))

# image_id -> list of (box, difficult)
TruthIndex = Mapping[Hashable, Sequence[Tuple[Sequence[float], bool]]]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(xmin, ymin, xmax, ymax)`` boxes."""
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


class MatchResult(NamedTuple):
    flags: np.ndarray   # TP / FP / IGNORED per detection, in ranked order
    order: np.ndarray   # ranked order as indices into the input list
    num_truths: int     # non-difficult truths


def match_for_ap(detections: Sequence, truths: TruthIndex, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy VOC-style matching for a single class.

    ``detections`` are objects with ``image_id``, ``confidence`` and ``box``.
    They are ranked by confidence (stable on ties). Each one takes the
    highest-IoU still-unmatched non-difficult truth of its image when that
    IoU reaches ``iou_thresh``. A miss that overlaps a difficult truth by at
    least ``iou_thresh`` is ignored rather than counted as a false positive.
    """
    conf = np.asarray([d.confidence for d in detections], dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    used = {img: [False] * len(ts) for img, ts in truths.items()}
    flags = np.empty(len(order), dtype=np.int64)
    for rank, i in enumerate(order):
        det = detections[i]
        cands = truths.get(det.image_id, ())
        best, best_j, near_difficult = -1.0, -1, False
        for j, (box, difficult) in enumerate(cands):
            ov = iou(det.box, box)
            if difficult:
                near_difficult |= ov >= iou_thresh
            elif not used[det.image_id][j] and ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_thresh:
            used[det.image_id][best_j] = True
            flags[rank] = TP
        else:
            flags[rank] = IGNORED if near_difficult else FP
    n = sum(1 for ts in truths.values() for _, difficult in ts if not difficult)
    return MatchResult(flags, order, n)


def average_precision(flags: Sequence[int], num_truths: int) -> Optional[float]:
    """All-point interpolated AP: area under the monotone precision envelope.

    Returns ``None`` when there is nothing to score (no truths and no
    detections) and ``0.0`` for detections without any truth.
    """
    flags = np.asarray(flags, dtype=np.int64)
    flags = flags[flags != IGNORED]
    if num_truths < 0:
        raise ValueError("num_truths must be nonnegative")
    if num_truths == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags == TP)
    fp = np.cumsum(flags == FP)
    recall = tp / num_truths
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def map_at(detections_by_class: Mapping[int, Sequence], truths_by_class: Mapping[int, TruthIndex],
           iou_thresh: float = 0.5) -> Tuple[Dict[int, Optional[float]], float]:
    """Per-class AP and their mean over classes that have at least one truth."""
    per_class: Dict[int, Optional[float]] = {}
    for c in sorted(set(detections_by_class) | set(truths_by_class)):
        res = match_for_ap(detections_by_class.get(c, ()), truths_by_class.get(c, {}), iou_thresh)
        per_class[c] = average_precision(res.flags, res.num_truths)
    scored = [per_class[c] for c in per_class if _num_truths(truths_by_class.get(c, {})) > 0]
    return per_class, (float(np.mean(scored)) if scored else math.nan)


def coco_map(detections_by_class, truths_by_class, thresholds=COCO_THRESHOLDS) -> float:
    """COCO-style AP: mean of :func:`map_at` over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([map_at(detections_by_class, truths_by_class, t)[1] for t in thresholds]))


def _num_truths(index: TruthIndex) -> int:
    return sum(1 for ts in index.values() for _, difficult in ts if not difficult)


def group_detections(detections: Iterable) -> Dict[int, List]:
    out: Dict[int, List] = defaultdict(list)
    for d in detections:
        out[int(d.class_id)].append(d)
    return dict(out)


def group_truths(items: Iterable[Tuple[Hashable, int, Sequence[float], bool]]) -> Dict[int, Dict[Hashable, list]]:
    """Build ``class -> image_id -> [(box, difficult)]`` from flat tuples."""
    out: Dict[int, Dict[Hashable, list]] = defaultdict(lambda: defaultdict(list))
    for image_id, cls, box, difficult in items:
        out[int(cls)][image_id].append((tuple(box), bool(difficult)))
    return {c: dict(v) for c, v in out.items()}


def evaluate(detections: Iterable, truth_items, iou_thresh: float = 0.5) -> dict:
    """AP50 per class, mAP50, AP75 and COCO AP in one report dictionary."""
    dets = group_detections(detections)
    truths = group_truths(truth_items)
    per_class, map50 = map_at(dets, truths, iou_thresh)
    _, map75 = map_at(dets, truths, 0.75)
    return {"per_class_ap": {str(c): v for c, v in per_class.items()},
            "map50": map50, "map75": map75, "map": coco_map(dets, truths)}
