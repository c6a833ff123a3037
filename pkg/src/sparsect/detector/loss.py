"""SSD multibox loss: softmax cross-entropy with 3:1 hard negative mining plus
smooth-L1 box regression on positive anchors."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .model import BACKGROUND


class LossResult(NamedTuple):
    loss: float
    dlogits: np.ndarray
    ddeltas: np.ndarray
    n_pos: int


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def smooth_l1(x: np.ndarray):
    """Elementwise smooth-L1 (beta = 1) and its derivative."""
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def hard_negatives(neg_loss: np.ndarray, positive: np.ndarray, neg_ratio: float = 3.0) -> np.ndarray:
    """Boolean mask of the highest-loss negatives, ``neg_ratio`` per positive.

    An image without positives still mines ``neg_ratio`` negatives.
    """
    selected = np.zeros_like(positive)
    for i in range(positive.shape[0]):
        n_pos = int(positive[i].sum())
        n_neg = min(int(neg_ratio * max(n_pos, 1)), int((~positive[i]).sum()))
        cand = np.where(positive[i], -np.inf, neg_loss[i])
        order = np.argsort(-cand, kind="stable")
        selected[i, order[:n_neg]] = True
    return selected


def multibox_loss(logits, deltas, labels, targets, neg_ratio: float = 3.0) -> LossResult:
    """Batch loss normalized by the total number of positive anchors (at least 1).

    ``logits`` is ``(B, D_p, C+1)`` with background in column 0, ``labels``
    holds foreground class indices or ``-1`` for background.
    """
    logits = np.asarray(logits, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    labels = np.asarray(labels)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim == 2:
        return _squeeze(multibox_loss(logits[None], deltas[None], labels[None], targets[None], neg_ratio))
    positive = labels >= 0
    cols = np.where(positive, labels + 1, BACKGROUND)
    logp = _log_softmax(logits)
    ce = -np.take_along_axis(logp, cols[..., None], axis=-1)[..., 0]
    chosen = positive | hard_negatives(ce, positive, neg_ratio)
    n_pos = int(positive.sum())
    norm = float(max(n_pos, 1))

    reg, dreg = smooth_l1(deltas - targets)
    loss = (ce[chosen].sum() + reg[positive].sum()) / norm

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, cols[..., None],
                      np.take_along_axis(dlogits, cols[..., None], axis=-1) - 1.0, axis=-1)
    dlogits = dlogits * (chosen[..., None] / norm)
    ddeltas = dreg * (positive[..., None] / norm)
    return LossResult(float(loss), dlogits, ddeltas, n_pos)


def _squeeze(res: LossResult) -> LossResult:
    return LossResult(res.loss, res.dlogits[0], res.ddeltas[0], res.n_pos)
