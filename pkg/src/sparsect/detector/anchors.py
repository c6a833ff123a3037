"""Prior boxes, box coding and anchor-to-truth matching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np

SSD300_GRID_SIZES = (38, 19, 10, 5, 3, 1)
DESK_GRID_SIZES = (8, 4, 2, 1)


class Anchor(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class AnchorConfig:
    scale_grid_sizes: Tuple[int, ...] = DESK_GRID_SIZES
    aspect_ratios: Tuple[float, ...] = (1.0, 2.0, 0.5)
    box_size_range: Tuple[float, float] = (0.2, 0.9)

    def __post_init__(self):
        grids = tuple(int(g) for g in self.scale_grid_sizes)
        object.__setattr__(self, "scale_grid_sizes", grids)
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        object.__setattr__(self, "box_size_range", tuple(float(s) for s in self.box_size_range))
        if not grids or any(g < 1 for g in grids):
            raise ValueError("grid sizes must be positive")
        if any(a <= b for a, b in zip(grids, grids[1:])):
            raise ValueError("grid sizes must be strictly decreasing")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be a nonempty list of positive reals")
        s_min, s_max = self.box_size_range
        if not 0 < s_min <= s_max:
            raise ValueError("box_size_range must satisfy 0 < s_min <= s_max")

    @property
    def n_ratios(self) -> int:
        return len(self.aspect_ratios)

    @property
    def n_anchors(self) -> int:
        return self.n_ratios * sum(g * g for g in self.scale_grid_sizes)

    def box_size(self, k: int) -> float:
        s_min, s_max = self.box_size_range
        n = len(self.scale_grid_sizes)
        return s_min if n == 1 else s_min + (s_max - s_min) * k / (n - 1)


@dataclass
class Anchors:
    """Center-form prior boxes ``(cx, cy, w, h)`` plus their ``(k, m, h, w)`` keys."""

    boxes: np.ndarray
    keys: List[Tuple[int, int, int, int]]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __iter__(self) -> Iterator[Anchor]:
        return (Anchor(*map(float, b)) for b in self.boxes)

    def corners(self) -> np.ndarray:
        return center_to_corners(self.boxes)


def generate_anchors(cfg: AnchorConfig) -> Anchors:
    boxes, keys = [], []
    for k, g in enumerate(cfg.scale_grid_sizes):
        s = cfg.box_size(k)
        for m, ratio in enumerate(cfg.aspect_ratios):
            w, h = s * np.sqrt(ratio), s / np.sqrt(ratio)
            for row in range(g):
                for col in range(g):
                    boxes.append(((col + 0.5) / g, (row + 0.5) / g, w, h))
                    keys.append((k, m, row, col))
    return Anchors(np.asarray(boxes, dtype=np.float64), keys)


def center_to_corners(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corners_to_center(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Offsets that :func:`decode_boxes` maps back onto center-form ``boxes``."""
    a = np.asarray(anchors, dtype=np.float64)
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack([
        (b[:, 0] - a[:, 0]) / a[:, 2],
        (b[:, 1] - a[:, 1]) / a[:, 3],
        np.log(b[:, 2] / a[:, 2]),
        np.log(b[:, 3] / a[:, 3]),
    ], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, clip: bool = True) -> np.ndarray:
    """Apply regression offsets to center-form anchors.

    Returns corner-form boxes clipped to the unit square, or the raw
    center-form boxes when ``clip`` is false.
    """
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    if a.shape != d.shape:
        raise ValueError(f"anchor/delta count mismatch: {a.shape} vs {d.shape}")
    centers = np.stack([
        a[:, 0] + d[:, 0] * a[:, 2],
        a[:, 1] + d[:, 1] * a[:, 3],
        a[:, 2] * np.exp(d[:, 2]),
        a[:, 3] * np.exp(d[:, 3]),
    ], axis=1)
    if not clip:
        return centers
    return np.clip(center_to_corners(centers), 0.0, 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form box sets ``(n, 4)`` and ``(m, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0.0, None), axis=2)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


class Matches(NamedTuple):
    labels: np.ndarray   # (D_p,) class index, -1 for background
    targets: np.ndarray  # (D_p, 4) regression targets, zero for background
    matched: np.ndarray  # (D_p,) index of the matched truth, -1 for background


def match_anchors(anchors: Anchors, gt_boxes: Sequence, gt_labels: Sequence[int],
                  threshold: float = 0.5) -> Matches:
    """Assign each anchor a truth: IoU >= ``threshold`` or the truth's best anchor.

    Every truth claims its highest-IoU anchor (lowest index on ties, later
    truths win conflicts); remaining anchors take their best truth when the
    overlap reaches ``threshold``.
    """
    n = len(anchors)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if gt.shape[0] == 0:
        return Matches(labels, targets, matched)
    ious = iou_matrix(anchors.corners(), gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    pos = best_iou >= threshold
    matched[pos] = best_gt[pos]
    for j, i in enumerate(ious.argmax(axis=0)):
        matched[i] = j
    pos = matched >= 0
    labels[pos] = gt_labels[matched[pos]]
    targets[pos] = encode_boxes(anchors.boxes[pos], corners_to_center(gt[matched[pos]]))
    return Matches(labels, targets, matched)
