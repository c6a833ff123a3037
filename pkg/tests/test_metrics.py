import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsect.detector.inference import Detection
from sparsect.metrics import (
    FP,
    IGNORED,
    TP,
    average_precision,
    coco_map,
    evaluate,
    group_detections,
    group_truths,
    iou,
    map_at,
    match_for_ap,
)


def test_iou_reference_value():
    assert abs(iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1 / 7) <= 1e-9
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0
    with pytest.raises(ValueError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))


def test_ap_hand_examples():
    assert average_precision([TP, TP], 2) == 1.0
    assert average_precision([FP, TP], 1) == 0.5
    assert average_precision([TP, FP, TP], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([TP, IGNORED, FP], 2) == pytest.approx(0.5)
    assert average_precision([], 0) is None
    assert average_precision([FP], 0) == 0.0
    assert average_precision([], 3) == 0.0


def test_matching_duplicates_and_difficult():
    truths = {"a": [((0, 0, 1, 1), False), ((2, 2, 3, 3), True)]}
    dets = [Detection(0, 0.9, (0, 0, 1, 1), "a"), Detection(0, 0.8, (0, 0, 1, 1), "a"),
            Detection(0, 0.7, (2, 2, 3, 3), "a"), Detection(0, 0.6, (0, 0, 1, 1), "b")]
    res = match_for_ap(dets, truths)
    assert list(res.flags) == [TP, FP, IGNORED, FP]
    assert res.num_truths == 1


def test_ties_keep_input_order():
    truths = {"a": [((0, 0, 1, 1), False)]}
    dets = [Detection(0, 0.5, (5, 5, 6, 6), "a"), Detection(0, 0.5, (0, 0, 1, 1), "a")]
    res = match_for_ap(dets, truths)
    assert list(res.order) == [0, 1]
    assert list(res.flags) == [FP, TP]


def test_map_skips_classes_without_truths():
    truths = group_truths([("a", 0, (0, 0, 1, 1), False)])
    dets = group_detections([Detection(0, 0.9, (0, 0, 1, 1), "a"), Detection(1, 0.9, (0, 0, 1, 1), "a")])
    per_class, m = map_at(dets, truths)
    assert per_class == {0: 1.0, 1: 0.0}
    assert m == 1.0
    _, empty = map_at({}, {})
    assert math.isnan(empty)


def test_perfect_predictions_score_one():
    items = [("a", 0, (0.1, 0.1, 0.4, 0.4), False), ("a", 1, (0.5, 0.5, 0.9, 0.9), False),
             ("b", 0, (0.2, 0.2, 0.6, 0.6), False)]
    dets = [Detection(c, 1.0, b, i) for i, c, b, _ in items]
    rep = evaluate(dets, items)
    assert rep["map50"] == rep["map75"] == rep["map"] == 1.0


def test_coco_map_is_threshold_average():
    items = [("a", 0, (0.0, 0.0, 1.0, 1.0), False)]
    # IoU 0.64 counts at 0.50..0.60 only: 3 of 10 thresholds
    dets = [Detection(0, 1.0, (0.0, 0.0, 0.8, 0.8), "a")]
    assert coco_map(group_detections(dets), group_truths(items)) == pytest.approx(0.3)


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def oracle_ap(dets, truths, thr=0.5):
    """Sweep every confidence threshold, then integrate the max-precision envelope over recall."""
    n_truth = sum(len(v) for v in truths.values())
    points = []
    for t in sorted({d[1] for d in dets}, reverse=True):
        kept = sorted((d for d in dets if d[1] >= t), key=lambda d: -d[1])
        used = set()
        tp = 0
        for img, _, box in kept:
            cands = [(_iou(box, g), j) for j, g in enumerate(truths.get(img, [])) if (img, j) not in used]
            best = max(cands, default=(0.0, None))
            if best[1] is not None and best[0] >= thr:
                used.add((img, best[1]))
                tp += 1
        points.append((tp / n_truth, tp / len(kept)))
    grid = sorted({0.0, 1.0} | {r for r, _ in points})
    area = 0.0
    for lo, hi in zip(grid, grid[1:]):
        area += (hi - lo) * max((p for r, p in points if r >= hi), default=0.0)
    return area


box = st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(1, 4), st.integers(1, 4)).map(
    lambda t: (t[0] / 10, t[1] / 10, (t[0] + t[2]) / 10, (t[1] + t[3]) / 10))


@given(st.lists(st.tuples(st.sampled_from("ab"), box), min_size=1, max_size=4),
       st.lists(st.tuples(st.sampled_from("abc"), box), min_size=0, max_size=5),
       st.permutations(range(5)))
def test_ap_matches_threshold_sweep_oracle(truth_list, det_list, perm):
    truths = {}
    for img, b in truth_list:
        truths.setdefault(img, []).append(b)
    confs = [0.9 - 0.1 * perm[i] for i in range(len(det_list))]
    dets = [(img, c, b) for (img, b), c in zip(det_list, confs)]
    res = match_for_ap([Detection(0, c, b, img) for img, c, b in dets],
                       {k: [(b, False) for b in v] for k, v in truths.items()})
    ap = average_precision(res.flags, res.num_truths)
    expect = oracle_ap(dets, truths) if dets else 0.0
    assert ap == pytest.approx(expect, abs=1e-12)
