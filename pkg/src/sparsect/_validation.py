"""Input checks shared by the estimator wrappers and the command line."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np


def check_images(X, side: Optional[int] = None) -> np.ndarray:
    """Return ``X`` as a finite float64 stack ``(n, side, side)``; a single image becomes ``n = 1``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images of shape (n, side, side), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    if side is not None and X.shape[1] != side:
        raise ValueError(f"images are {X.shape[1]}px wide, model expects {side}px")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_truths(y: Sequence, n_images: int, n_classes: Optional[int] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Normalize per-image truths to ``(labels int64 (k,), boxes float64 (k, 4))`` pairs.

    Each entry may already be such a pair or a list of ``(label, box)``
    tuples. Boxes are normalized corners and must be non-degenerate.
    """
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} truth entries for {n_images} images")
    out = []
    for i, entry in enumerate(y):
        if isinstance(entry, tuple) and len(entry) == 2 and np.ndim(entry[0]) == 1 and np.ndim(entry[1]) == 2:
            labels, boxes = entry
        else:
            labels = [c for c, _ in entry]
            boxes = [b for _, b in entry]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(labels) != len(boxes):
            raise ValueError(f"image {i}: {len(labels)} labels but {len(boxes)} boxes")
        if np.any(labels < 0) or (n_classes is not None and np.any(labels >= n_classes)):
            raise ValueError(f"image {i}: labels must lie in [0, {n_classes})")
        if not np.all(np.isfinite(boxes)):
            raise ValueError(f"image {i}: boxes contain NaN or Inf")
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise ValueError(f"image {i}: degenerate box")
        if np.any(boxes < 0.0) or np.any(boxes > 1.0):
            raise ValueError(f"image {i}: boxes must be normalized to [0, 1]")
        out.append((labels, boxes))
    return out
