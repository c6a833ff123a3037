"""Toy SSD-style detector: patch-embedding backbone and per-scale heads.

Class logits put background in column 0; foreground class ``c`` lives in
column ``c + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence

import numpy as np

from ..numkit import LinearMap, linear_backward, linear_forward
from ..sct import PriorScores
from .anchors import AnchorConfig, Anchors, generate_anchors

BACKGROUND = 0


@dataclass
class DetectorModel:
    anchor_cfg: AnchorConfig
    n_classes: int
    image_side: int
    backbone: List[LinearMap]
    cls_heads: List[LinearMap]
    reg_heads: List[LinearMap]

    @classmethod
    def init(cls, anchor_cfg: AnchorConfig, n_classes: int, rng: np.random.Generator,
             image_side: int = 64, channels: Sequence[int] = (16,)) -> "DetectorModel":
        grids = anchor_cfg.scale_grid_sizes
        if len(channels) == 1:
            channels = tuple(channels) * len(grids)
        if len(channels) != len(grids):
            raise ValueError("need one channel count per scale")
        for g in grids:
            if image_side % g:
                raise ValueError(f"image side {image_side} is not divisible by grid {g}")
        a = anchor_cfg.n_ratios
        backbone, cls_heads, reg_heads = [], [], []
        for g, c in zip(grids, channels):
            patch = (image_side // g) ** 2
            backbone.append(LinearMap.init(patch, c, rng, residual=False))
            cls_heads.append(LinearMap.init(c, a * (n_classes + 1), rng, residual=False))
            reg_heads.append(LinearMap.init(c, a * 4, rng, residual=False))
        return cls(anchor_cfg, int(n_classes), int(image_side), backbone, cls_heads, reg_heads)

    @property
    def channels(self) -> List[int]:
        return [layer.out_dim for layer in self.backbone]

    @property
    def anchors(self) -> Anchors:
        return generate_anchors(self.anchor_cfg)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for group in ("backbone", "cls", "reg"):
            for k, layer in enumerate(self._group(group)):
                out[f"{group}.{k}.weight"] = layer.weight
                out[f"{group}.{k}.bias"] = layer.bias
        return out

    def _group(self, name: str) -> List[LinearMap]:
        return {"backbone": self.backbone, "cls": self.cls_heads, "reg": self.reg_heads}[name]

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.anchor_cfg, self.n_classes, self.image_side,
                             [l.copy() for l in self.backbone], [l.copy() for l in self.cls_heads],
                             [l.copy() for l in self.reg_heads])


def _patches(images: np.ndarray, g: int) -> np.ndarray:
    b, side, _ = images.shape
    p = side // g
    return images.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b * g * g, p * p)


def _check_images(images, model: DetectorModel) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"images must be square (side x side), got {images.shape[1:]}")
    if images.shape[1] != model.image_side:
        raise ValueError(f"image side {images.shape[1]} != model side {model.image_side}")
    return images


class BackboneCache(NamedTuple):
    patches: List[np.ndarray]
    pre: List[np.ndarray]


def backbone_forward(images, model: DetectorModel, return_cache: bool = False):
    """Per-scale feature grids ``(B, g, g, c)`` for a batch (or ``(g, g, c)`` for one image)."""
    single = np.asarray(images).ndim == 2
    images = _check_images(images, model)
    b = images.shape[0]
    feats, patches, pres = [], [], []
    for g, layer in zip(model.anchor_cfg.scale_grid_sizes, model.backbone):
        x = _patches(images, g)
        pre = linear_forward(layer, x)
        feats.append(np.maximum(pre, 0.0).reshape(b, g, g, layer.out_dim))
        patches.append(x)
        pres.append(pre)
    if single:
        feats = [f[0] for f in feats]
    if return_cache:
        return feats, BackboneCache(patches, pres)
    return feats


class HeadOutput(NamedTuple):
    logits: np.ndarray      # (B, D_p, C_s + 1), background in column 0
    deltas: np.ndarray      # (B, D_p, 4)


def _to_rows(out: np.ndarray, b: int, g: int, a: int, width: int) -> np.ndarray:
    return out.reshape(b, g, g, a, width).transpose(0, 3, 1, 2, 4).reshape(b, a * g * g, width)


def _from_rows(rows: np.ndarray, b: int, g: int, a: int, width: int) -> np.ndarray:
    return rows.reshape(b, a, g, g, width).transpose(0, 2, 3, 1, 4).reshape(b * g * g, a * width)


def heads_forward(features: Sequence[np.ndarray], model: DetectorModel) -> HeadOutput:
    """Class logits and box offsets for every anchor, rows in ``(k, m, h, w)`` order."""
    single = np.asarray(features[0]).ndim == 3
    feats = [np.asarray(f)[None] if single else np.asarray(f) for f in features]
    if len(feats) != len(model.backbone):
        raise ValueError("need one feature grid per scale")
    a = model.anchor_cfg.n_ratios
    width = model.n_classes + 1
    logits, deltas = [], []
    for f, g, cls_head, reg_head in zip(feats, model.anchor_cfg.scale_grid_sizes,
                                        model.cls_heads, model.reg_heads):
        b = f.shape[0]
        if f.shape[1:] != (g, g, cls_head.in_dim):
            raise ValueError(f"feature grid shape {f.shape[1:]} does not match scale {g}")
        x = f.reshape(b * g * g, -1)
        logits.append(_to_rows(linear_forward(cls_head, x), b, g, a, width))
        deltas.append(_to_rows(linear_forward(reg_head, x), b, g, a, 4))
    out = HeadOutput(np.concatenate(logits, axis=1), np.concatenate(deltas, axis=1))
    if single:
        return HeadOutput(out.logits[0], out.deltas[0])
    return out


def split_background(logits: np.ndarray, model: DetectorModel) -> "tuple[PriorScores, np.ndarray]":
    """Separate one image's logits into foreground :class:`PriorScores` and the background column."""
    cfg = model.anchor_cfg
    prior = PriorScores(logits[:, BACKGROUND + 1:], cfg.scale_grid_sizes, cfg.n_ratios)
    return prior, logits[:, BACKGROUND]


def heads_backward(features: Sequence[np.ndarray], model: DetectorModel, dlogits: np.ndarray,
                   ddeltas: np.ndarray, need_features: bool = True):
    """Return ``(param_grads, feature_grads)`` for batched :func:`heads_forward`."""
    a = model.anchor_cfg.n_ratios
    width = model.n_classes + 1
    grads: Dict[str, np.ndarray] = {}
    dfeats = []
    start = 0
    for k, (f, g) in enumerate(zip(features, model.anchor_cfg.scale_grid_sizes)):
        b = f.shape[0]
        n = a * g * g
        x = f.reshape(b * g * g, -1)
        up_c = _from_rows(dlogits[:, start:start + n], b, g, a, width)
        up_r = _from_rows(ddeltas[:, start:start + n], b, g, a, 4)
        dx_c, grads[f"cls.{k}.weight"], grads[f"cls.{k}.bias"] = linear_backward(model.cls_heads[k], x, up_c)
        dx_r, grads[f"reg.{k}.weight"], grads[f"reg.{k}.bias"] = linear_backward(model.reg_heads[k], x, up_r)
        if need_features:
            dfeats.append((dx_c + dx_r).reshape(f.shape))
        start += n
    return grads, dfeats


def backbone_backward(cache: BackboneCache, model: DetectorModel, dfeats: Sequence[np.ndarray]):
    grads: Dict[str, np.ndarray] = {}
    for k, (x, pre, df) in enumerate(zip(cache.patches, cache.pre, dfeats)):
        up = df.reshape(pre.shape) * (pre > 0)
        _, grads[f"backbone.{k}.weight"], grads[f"backbone.{k}.bias"] = linear_backward(
            model.backbone[k], x, up)
    return grads
