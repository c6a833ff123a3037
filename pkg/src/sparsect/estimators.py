"""scikit-learn style wrappers around pretraining and episode fine-tuning."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_truths
from .detector.anchors import DESK_GRID_SIZES, AnchorConfig
from .detector.inference import Detection, NmsConfig, infer
from .detector.model import DetectorModel, backbone_forward, heads_forward, split_background
from .detector.training import AblationFlags, Schedule, finetune, pretrain
from .sct import SctParams, build_contextual_fields, sct_forward


class SSDDetector(BaseEstimator):
    """Toy single-shot detector trained on source-domain scenes.

    ``fit(X, y)`` takes images ``(n, side, side)`` and per-image truths
    (labels, normalized corner boxes). ``predict`` returns one list of
    :class:`Detection` per image.
    """

    def __init__(self, grid_sizes=DESK_GRID_SIZES, aspect_ratios=(1.0, 2.0, 0.5),
                 box_size_range=(0.2, 0.9), channels=16, n_classes=None, iterations=500,
                 batch_size=8, learning_rate=0.05, milestones=(350, 450), momentum=0.9,
                 weight_decay=5e-4, nms_iou=0.45, score_threshold=0.01, top_k=200, random_state=0):
        self.grid_sizes = grid_sizes
        self.aspect_ratios = aspect_ratios
        self.box_size_range = box_size_range
        self.channels = channels
        self.n_classes = n_classes
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.milestones = milestones
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nms_iou = nms_iou
        self.score_threshold = score_threshold
        self.top_k = top_k
        self.random_state = random_state

    def _schedule(self) -> Schedule:
        return Schedule(self.iterations, self.batch_size, self.learning_rate, tuple(self.milestones),
                        momentum=self.momentum, weight_decay=self.weight_decay)

    def fit(self, X, y):
        X = check_images(X)
        truths = check_truths(y, len(X), self.n_classes)
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = int(max((l.max() for l, _ in truths if l.size), default=-1)) + 1
        if n_classes < 1:
            raise ValueError("no labeled boxes to learn classes from")
        cfg = AnchorConfig(tuple(self.grid_sizes), tuple(self.aspect_ratios), tuple(self.box_size_range))
        rng = np.random.default_rng(self.random_state)
        init = DetectorModel.init(cfg, n_classes, rng, image_side=X.shape[1], channels=(self.channels,))
        self.model_, self.loss_curve_ = pretrain(init, X, truths, self._schedule(), seed=self.random_state)
        self.n_classes_ = n_classes
        return self

    def predict(self, X) -> List[List[Detection]]:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.image_side)
        nms_cfg = NmsConfig(self.nms_iou, self.score_threshold, self.top_k)
        return [infer(self.model_, img, None, nms_cfg, image_id=i) for i, img in enumerate(X)]


def _resolve_model(detector) -> DetectorModel:
    if isinstance(detector, DetectorModel):
        return detector
    if isinstance(detector, SSDDetector):
        check_is_fitted(detector, "model_")
        return detector.model_
    raise TypeError("detector must be a fitted SSDDetector or a DetectorModel")


class SparseContextFineTuner(BaseEstimator):
    """Adapt a pretrained detector to novel classes from an N-shot episode.

    Only the transformer and the target classifier learn; the detector is
    frozen unless ``train_heads`` is set. ``transform`` returns the
    context-enhanced prior-box scores, ``predict_proba`` the target class
    probabilities for every prior box.
    """

    def __init__(self, detector=None, n_target_classes=None, lam=0.6, tau=None, focus="attention",
                 kernels=(2,), feature_scales=None, context=True, sparse=True, train_heads=False,
                 iterations=300, batch_size=64, learning_rate=0.01, milestones=(200, 260),
                 momentum=0.9, weight_decay=5e-4, nms_iou=0.45, score_threshold=0.01, top_k=200,
                 random_state=0):
        self.detector = detector
        self.n_target_classes = n_target_classes
        self.lam = lam
        self.tau = tau
        self.focus = focus
        self.kernels = kernels
        self.feature_scales = feature_scales
        self.context = context
        self.sparse = sparse
        self.train_heads = train_heads
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.milestones = milestones
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nms_iou = nms_iou
        self.score_threshold = score_threshold
        self.top_k = top_k
        self.random_state = random_state

    def fit(self, X, y):
        model = _resolve_model(self.detector)
        X = check_images(X, model.image_side)
        truths = check_truths(y, len(X), self.n_target_classes)
        c_t = self.n_target_classes
        if c_t is None:
            c_t = int(max((l.max() for l, _ in truths if l.size), default=-1)) + 1
        feats = backbone_forward(X[0], model)
        scales = self.feature_scales if self.feature_scales is not None else range(min(4, len(feats)))
        d_f = sum(feats[k].shape[-1] for k in scales)
        rng = np.random.default_rng(self.random_state)
        sct = SctParams.init(d_f, model.n_classes, c_t, rng, lam=self.lam, tau=self.tau, focus=self.focus,
                             kernels=tuple(self.kernels), feature_scales=self.feature_scales)
        flags = AblationFlags(self.context, self.sparse, self.focus == "gap", self.train_heads)
        schedule = Schedule(self.iterations, self.batch_size, self.learning_rate, tuple(self.milestones),
                            momentum=self.momentum, weight_decay=self.weight_decay)
        result = finetune(model, sct, X, truths, schedule, flags, seed=self.random_state)
        self.model_, self.sct_, self.loss_curve_ = result.model, result.sct, result.log
        self.fallback_rows_ = result.fallback_rows
        self.n_target_classes_ = c_t
        return self

    def _traces(self, X):
        check_is_fitted(self, "sct_")
        X = check_images(X, self.model_.image_side)
        for img in X:
            feats = backbone_forward(img, self.model_)
            prior, _ = split_background(heads_forward(feats, self.model_).logits, self.model_)
            fields = build_contextual_fields(prior, feats, self.sct_.kernels, self.sct_.feature_scales)
            yield sct_forward(prior.scores, fields, self.sct_)

    def transform(self, X) -> np.ndarray:
        """Context-enhanced scores, shape ``(n, D_p, C_s)``."""
        return np.stack([trace.p_hat for _, trace in self._traces(X)])

    def predict_proba(self, X) -> np.ndarray:
        """Target class probabilities per prior box, shape ``(n, D_p, C_t)``."""
        return np.stack([y for y, _ in self._traces(X)])

    def predict(self, X) -> List[List[Detection]]:
        check_is_fitted(self, "sct_")
        X = check_images(X, self.model_.image_side)
        nms_cfg = NmsConfig(self.nms_iou, self.score_threshold, self.top_k)
        return [infer(self.model_, img, self.sct_, nms_cfg, image_id=i) for i, img in enumerate(X)]
