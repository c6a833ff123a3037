"""Source-domain pretraining and target-domain fine-tuning with the transformer."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..numkit import NonFiniteError, SgdState, sgd_step
from ..sct import SctParams, build_contextual_fields, sct_backward, sct_forward
from .anchors import match_anchors
from .loss import multibox_loss
from .model import (
    BACKGROUND,
    DetectorModel,
    backbone_backward,
    backbone_forward,
    heads_backward,
    heads_forward,
    split_background,
)

logger = logging.getLogger(__name__)

# (labels, corner boxes) for one image
Truth = Tuple[np.ndarray, np.ndarray]


class TrainingDiverged(NonFiniteError):
    pass


@dataclass(frozen=True)
class Schedule:
    iterations: int
    batch_size: int
    learning_rate: float
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def lr_at(self, iteration: int) -> float:
        drops = sum(iteration >= m for m in self.milestones)
        return self.learning_rate * self.gamma ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


# fine-tuning schedule for full-scale VOC runs
FULL_SCALE_SCHEDULE = Schedule(iterations=4000, batch_size=64, learning_rate=4e-3,
                               milestones=(3000, 3500), gamma=0.1, momentum=0.9, weight_decay=5e-4)
DESK_PRETRAIN = Schedule(iterations=500, batch_size=8, learning_rate=0.05, milestones=(350, 450))
DESK_FINETUNE = Schedule(iterations=300, batch_size=64, learning_rate=0.01, milestones=(200, 260))


@dataclass(frozen=True)
class AblationFlags:
    """Which transformer components are active during fine-tuning.

    ``context`` off forces ``lam = 0`` (no multi-scale feature path),
    ``sparse`` off forces ``tau = 0`` (dense relations), ``gap`` replaces the
    attention focus layer by global average pooling.
    """

    context: bool = True
    sparse: bool = True
    gap: bool = False
    train_heads: bool = False

    def apply(self, params: SctParams) -> SctParams:
        out = params.copy()
        if not self.context:
            out.lam = 0.0
        if not self.sparse:
            out.tau = 0.0
        out.focus = "gap" if self.gap else "attention"
        return out

    @property
    def name(self) -> str:
        if not self.context and not self.sparse:
            return "baseline"
        parts = []
        if self.context:
            parts.append("context")
        if self.sparse:
            parts.append("sparse")
        name = "+".join(parts)
        return name + ("+gap" if self.gap else "")


def _check_finite(loss: float, iteration: int):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at iteration {iteration}")


@contextmanager
def _diverges_at(iteration: int):
    """Re-raise any non-finite intermediate as :class:`TrainingDiverged`."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except TrainingDiverged:
        raise
    except NonFiniteError as exc:
        raise TrainingDiverged(f"diverged at iteration {iteration}: {exc}") from None


def pretrain(model: DetectorModel, images: np.ndarray, truths: Sequence[Truth], schedule: Schedule,
             seed: int = 0, log: Optional[Callable[[dict], None]] = None) -> Tuple[DetectorModel, List[dict]]:
    """Train backbone and heads on labeled source scenes; returns a trained copy."""
    model = model.copy()
    images = np.asarray(images, dtype=np.float64)
    if len(images) != len(truths):
        raise ValueError("one truth entry per image required")
    anchors = model.anchors
    matches = [match_anchors(anchors, boxes, labels) for labels, boxes in truths]
    all_labels = np.stack([m.labels for m in matches])
    all_targets = np.stack([m.targets for m in matches])
    rng = np.random.default_rng(seed)
    state = SgdState(schedule.learning_rate, schedule.momentum, schedule.weight_decay)
    params = model.arrays()
    records = []
    batch = min(schedule.batch_size, len(images))
    for it in range(schedule.iterations):
        t0 = time.perf_counter()
        idx = np.sort(rng.choice(len(images), size=batch, replace=False))
        with _diverges_at(it):
            feats, cache = backbone_forward(images[idx], model, return_cache=True)
            heads = heads_forward(feats, model)
            res = multibox_loss(heads.logits, heads.deltas, all_labels[idx], all_targets[idx])
            _check_finite(res.loss, it)
            grads, dfeats = heads_backward(feats, model, res.dlogits, res.ddeltas)
            grads.update(backbone_backward(cache, model, dfeats))
            state.learning_rate = schedule.lr_at(it)
            sgd_step(params, grads, state)
        rec = {"iteration": it, "loss": res.loss, "lr": state.learning_rate,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        records.append(rec)
        if log is not None:
            log(rec)
    return model, records


@dataclass
class _EpisodeImage:
    feats: List[np.ndarray]
    logits: np.ndarray
    fields: object
    labels: np.ndarray
    positive: np.ndarray


def _prepare(model: DetectorModel, sct: SctParams, image, truth: Truth) -> _EpisodeImage:
    feats = backbone_forward(image, model)
    heads = heads_forward(feats, model)
    prior, _ = split_background(heads.logits, model)
    fields = build_contextual_fields(prior, feats, sct.kernels, sct.feature_scales)
    labels, boxes = truth
    match = match_anchors(model.anchors, boxes, labels)
    return _EpisodeImage(feats, heads.logits, fields, match.labels, match.labels >= 0)


@dataclass
class FinetuneResult:
    model: DetectorModel
    sct: SctParams
    log: List[dict] = field(default_factory=list)
    fallback_rows: int = 0


def finetune(model: DetectorModel, sct: SctParams, images: np.ndarray, truths: Sequence[Truth],
             schedule: Schedule, flags: AblationFlags = AblationFlags(), seed: int = 0,
             log: Optional[Callable[[dict], None]] = None) -> FinetuneResult:
    """Fine-tune the transformer and target classifier on an N-shot episode.

    Backbone and box regressors stay frozen; the source classifier heads
    train only with ``flags.train_heads`` (and then only through ``P``;
    the pooled scores ``Q`` are treated as constants). ``truths`` carry
    target class indices in ``[0, C_t)``.
    """
    model = model.copy()
    sct = flags.apply(sct)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if len(images) != len(truths):
        raise ValueError("one truth entry per image required")
    counts = np.bincount(np.concatenate([np.asarray(l, dtype=np.int64) for l, _ in truths]),
                         minlength=sct.c_t) if truths else np.zeros(sct.c_t, dtype=np.int64)
    if len(counts) > sct.c_t:
        raise ValueError("truth labels exceed the number of target classes")
    if np.any(counts == 0):
        raise ValueError(f"episode has no boxes for target classes {np.flatnonzero(counts == 0).tolist()}")
    prepared = [_prepare(model, sct, img, t) for img, t in zip(images, truths)]
    rng = np.random.default_rng(seed)
    state = SgdState(schedule.learning_rate, schedule.momentum, schedule.weight_decay)
    params = dict(sct.arrays())
    if flags.train_heads:
        params.update({k: v for k, v in model.arrays().items() if k.startswith("cls.")})
    records = []
    fallback = 0
    batch = min(schedule.batch_size, len(prepared))
    for it in range(schedule.iterations):
        t0 = time.perf_counter()
        idx = np.sort(rng.choice(len(prepared), size=batch, replace=False))
        chosen = [prepared[i] for i in idx]
        n_pos = max(sum(int(ep.positive.sum()) for ep in chosen), 1)
        grads: Dict[str, np.ndarray] = {}
        loss = 0.0
        with _diverges_at(it):
            for ep in chosen:
                logits = heads_forward(ep.feats, model).logits if flags.train_heads else ep.logits
                prior, _ = split_background(logits, model)
                y_hat, trace = sct_forward(prior.scores, ep.fields, sct)
                fallback += trace.n_fallback_rows
                pos = ep.positive
                lab = ep.labels[pos]
                loss -= float(np.sum(np.log(np.maximum(y_hat[pos, lab], 1e-300))))
                dz = np.zeros_like(y_hat)
                dz[pos] = y_hat[pos]
                dz[np.flatnonzero(pos), lab] -= 1.0
                g = sct_backward(trace, dz / n_pos, sct, wrt="logits")
                if flags.train_heads:
                    dlogits = np.zeros_like(logits)
                    dlogits[:, BACKGROUND + 1:] = g["p"]
                    head_grads, _ = heads_backward([f[None] for f in ep.feats], model, dlogits[None],
                                                   np.zeros((1, logits.shape[0], 4)), need_features=False)
                    g.update({k: v for k, v in head_grads.items() if k.startswith("cls.")})
                for name in params:
                    grads[name] = grads[name] + g[name] if name in grads else g[name]
            loss /= n_pos
            _check_finite(loss, it)
            state.learning_rate = schedule.lr_at(it)
            sgd_step(params, grads, state)
        rec = {"iteration": it, "loss": loss, "lr": state.learning_rate,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        records.append(rec)
        if log is not None:
            log(rec)
    if fallback:
        logger.debug("all-pruned relation rows (uniform gate fallback): %d", fallback)
    return FinetuneResult(model, sct, records, fallback)
