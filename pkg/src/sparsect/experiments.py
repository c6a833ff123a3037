"""Desk-scale ablation of the transformer components on 1-shot episodes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .data.synthetic import sample_episode
from .detector.model import DetectorModel
from .detector.training import AblationFlags, Schedule, finetune, pretrain
from .pipeline import detect_scenes, init_detector, init_sct, local_truths, score, synthesize

ABLATIONS = {
    "baseline": AblationFlags(context=False, sparse=False),
    "context": AblationFlags(context=True, sparse=False),
    "sparse": AblationFlags(context=False, sparse=True),
    "full": AblationFlags(context=True, sparse=True),
    "gap": AblationFlags(context=True, sparse=True, gap=True),
}

# a longer, wider source pretrain than the quick default so that target
# objectness is usable
ABLATION_OVERRIDES = {"data": {"n_source": 800}, "anchors": {"channels": 32},
                      "train": {"pretrain": {"iterations": 3000, "milestones": [2100, 2700]}}}


@dataclass
class AblationResult:
    ap50: Dict[str, List[float]] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)

    def median(self, name: str) -> float:
        return float(np.median(self.ap50[name]))


def pretrained_detector(cfg: dict, subsets: dict, meta: dict, seed: int = 0) -> DetectorModel:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    model = init_detector(cfg, len(meta["source_classes"]), rng)
    images = np.stack([s.image for s in subsets["source"]])
    model, _ = pretrain(model, images, local_truths(subsets["source"], meta["source_classes"]),
                        config_mod.schedule(cfg, "pretrain"), seed=seed)
    return model


def run_ablation(seeds: Sequence[int] = range(10), cfg: Optional[dict] = None, shots: int = 1,
                 data_seed: int = 0, model: Optional[DetectorModel] = None) -> AblationResult:
    """Median-ready AP50 per configuration; every configuration sees the same episodes and init."""
    cfg = cfg or config_mod.load_config(overrides=ABLATION_OVERRIDES)
    subsets, meta = synthesize(cfg, data_seed)
    if model is None:
        model = pretrained_detector(cfg, subsets, meta, data_seed)
    targets = meta["target_classes"]
    test = subsets["test"]
    ids = list(range(len(test)))
    test_truths = local_truths(test, targets)
    schedule: Schedule = config_mod.schedule(cfg, "finetune")
    result = AblationResult({name: [] for name in ABLATIONS}, list(seeds))
    for seed in seeds:
        episode = sample_episode(subsets["target"], targets, shots, seed)
        truths = local_truths(episode.truths, targets)
        sct0 = init_sct(cfg, model, len(targets), np.random.default_rng(np.random.SeedSequence(seed)))
        for name, flags in ABLATIONS.items():
            tuned = finetune(model, sct0, episode.images, truths, schedule, flags, seed=seed)
            dets = detect_scenes(model, tuned.sct, [s.image for s in test], ids, config_mod.nms_config(cfg))
            result.ap50[name].append(score(dets, test_truths, ids, cfg["eval"]["iou_threshold"])["map50"])
    return result
