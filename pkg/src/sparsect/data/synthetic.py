"""Synthetic detection scenes, source/target class splits and N-shot episodes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SHAPES = ("square", "disc", "cross", "bar", "ring", "triangle")
SPLIT_IDS = (1, 2, 3)
# seen:unseen ratio of the VOC protocol (15 base, 5 novel classes)
SEEN, UNSEEN = 15, 5

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    intensity: Tuple[float, float] = (0.6, 1.0)
    texture_period: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        lo, hi = self.intensity
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("intensity band must satisfy 0 < lo <= hi <= 1")
        if self.texture_period < 0:
            raise ValueError("texture period must be nonnegative")


def default_categories() -> Tuple[CategorySpec, ...]:
    # plain/striped siblings share a shape, so every split has confusable pairs
    cats = []
    for shape in SHAPES:
        cats.append(CategorySpec(shape, shape))
        cats.append(CategorySpec(f"{shape}_striped", shape, texture_period=2))
    return tuple(cats)


@dataclass(frozen=True)
class SyntheticConfig:
    image_side: int = 64
    categories: Tuple[CategorySpec, ...] = field(default_factory=default_categories)
    objects_per_scene: Tuple[int, int] = (1, 3)
    object_size: Tuple[int, int] = (10, 30)
    noise_sigma: float = 0.05
    clutter_density: float = 2.0

    def __post_init__(self):
        cats = tuple(c if isinstance(c, CategorySpec) else CategorySpec(**c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        keys = {(c.shape, tuple(c.intensity), c.texture_period) for c in cats}
        if len(keys) != len(cats) or len({c.name for c in cats}) != len(cats):
            raise ValueError("category specs must be pairwise distinct")
        if len(cats) < 4:
            raise ValueError("need at least 4 categories to form source and target splits")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_scene must satisfy 1 <= lo <= hi")
        smin, smax = self.object_size
        if not 3 <= smin <= smax <= self.image_side:
            raise ValueError("object_size must lie in [3, image_side]")
        if self.noise_sigma < 0 or self.clutter_density < 0:
            raise ValueError("noise and clutter must be nonnegative")

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.categories]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = [asdict(c) for c in self.categories]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "categories" in d:
            d["categories"] = tuple(CategorySpec(**{**c, "intensity": tuple(c["intensity"])})
                                    for c in d["categories"])
        for key in ("objects_per_scene", "object_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scene:
    image: np.ndarray
    truths: List[Tuple[int, Box]]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([c for c, _ in self.truths], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        return np.asarray([b for _, b in self.truths], dtype=np.float64).reshape(-1, 4)


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean ``(h, w)`` raster whose extent is exactly the full ``w x h`` box."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if shape in ("square", "bar"):
        return np.ones((h, w), dtype=bool)
    nx, ny = (xs - w / 2) / (w / 2), (ys - h / 2) / (h / 2)
    r2 = nx ** 2 + ny ** 2
    if shape == "disc":
        return r2 <= 1.0
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.3)
    if shape == "cross":
        tw, th = max(w / 3, 1.0), max(h / 3, 1.0)
        return (np.abs(xs - w / 2) <= tw / 2) | (np.abs(ys - h / 2) <= th / 2)
    if shape == "triangle":
        half = np.maximum(w / 2 * (np.floor(ys) + 1) / h, 0.5)
        return np.abs(xs - w / 2) <= half
    raise ValueError(f"unknown shape {shape!r}")


def render_object(spec: CategorySpec, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Intensity patch (zero outside the shape)."""
    mask = shape_mask(spec.shape, w, h)
    base = rng.uniform(*spec.intensity)
    patch = np.full((h, w), base)
    if spec.texture_period:
        stripes = (np.arange(w) // spec.texture_period) % 2 == 1
        patch[:, stripes] *= 0.5
    return np.where(mask, patch, 0.0)


def _overlaps(x0, y0, w, h, placed, gap=1):
    for px, py, pw, ph in placed:
        if x0 < px + pw + gap and px < x0 + w + gap and y0 < py + ph + gap and py < y0 + h + gap:
            return True
    return False


def generate_scene(cfg: SyntheticConfig, classes: Sequence[int], rng: np.random.Generator) -> Scene:
    """Render a scene containing only categories listed in ``classes``.

    Objects never overlap, so each truth box is exactly the rendered extent.
    """
    classes = list(classes)
    if not classes:
        raise ValueError("classes must be nonempty")
    side = cfg.image_side
    image = np.zeros((side, side))
    n_obj = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
    placed, truths = [], []
    for _ in range(n_obj):
        cls = classes[int(rng.integers(len(classes)))]
        spec = cfg.categories[cls]
        s = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        w, h = (s, max(3, round(s / 3))) if spec.shape == "bar" else (s, s)
        for _attempt in range(50):
            x0 = int(rng.integers(0, side - w + 1))
            y0 = int(rng.integers(0, side - h + 1))
            if not _overlaps(x0, y0, w, h, placed):
                break
        else:
            continue
        patch = render_object(spec, w, h, rng)
        region = image[y0:y0 + h, x0:x0 + w]
        image[y0:y0 + h, x0:x0 + w] = np.where(patch > 0, patch, region)
        placed.append((x0, y0, w, h))
        truths.append((cls, (x0 / side, y0 / side, (x0 + w) / side, (y0 + h) / side)))
    for _ in range(int(rng.poisson(cfg.clutter_density))):
        s = int(rng.integers(2, 4))
        x0, y0 = int(rng.integers(0, side - s + 1)), int(rng.integers(0, side - s + 1))
        if not _overlaps(x0, y0, s, s, placed):
            image[y0:y0 + s, x0:x0 + s] = rng.uniform(0.3, 0.9)
    if cfg.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, cfg.noise_sigma, size=image.shape), 0.0, 1.0)
    return Scene(image, truths)


def generate_scenes(cfg: SyntheticConfig, classes: Sequence[int], n: int, seed: int) -> List[Scene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(cfg, classes, rng) for _ in range(n)]


def split_classes(all_categories: Sequence, split_id: int) -> Tuple[List[int], List[int]]:
    """Deterministic disjoint (source, target) index lists for ``split_id`` in {1, 2, 3}.

    The target share is ``floor(n * 5 / 20)``. Targets form a contiguous run
    starting at ``(split_id - 1) * (n // 3)``, so with the default category
    order every target set contains a plain/striped pair of the same shape.
    """
    if split_id not in SPLIT_IDS:
        raise ValueError(f"split_id must be one of {SPLIT_IDS}, got {split_id!r}")
    n = all_categories if isinstance(all_categories, int) else len(all_categories)
    if n < 4:
        raise ValueError("need at least 4 categories")
    n_target = n * UNSEEN // (SEEN + UNSEEN)
    start = (split_id - 1) * (n // len(SPLIT_IDS))
    target = sorted((start + j) % n for j in range(n_target))
    source = [i for i in range(n) if i not in target]
    return source, target


class InsufficientInstances(ValueError):
    pass


@dataclass
class Episode:
    scene_indices: List[int]
    images: np.ndarray
    truths: List[List[Tuple[int, Box]]]
    target_classes: List[int]
    shots: int
    seed: int

    def class_counts(self) -> Dict[int, int]:
        counts = {c: 0 for c in self.target_classes}
        for t in self.truths:
            for c, _ in t:
                counts[c] += 1
        return counts


ALLOWED_SHOTS = (1, 2, 3, 5, 10)


def sample_episode(scenes: Sequence[Scene], target_classes: Sequence[int], shots: int, seed: int) -> Episode:
    """Pick scenes holding exactly ``shots`` instances of every target class.

    Scenes are visited in a seeded random order and accepted when they only
    contain target classes, add at least one still-needed instance and push
    no class over ``shots``.
    """
    if shots not in ALLOWED_SHOTS:
        raise ValueError(f"shots must be one of {ALLOWED_SHOTS}")
    targets = sorted(set(int(c) for c in target_classes))
    counts = {c: 0 for c in targets}
    chosen = []
    rng = np.random.default_rng(seed)
    for i in rng.permutation(len(scenes)):
        labels = [c for c, _ in scenes[i].truths]
        if not labels or any(c not in counts for c in labels):
            continue
        add = {c: labels.count(c) for c in set(labels)}
        if any(counts[c] + k > shots for c, k in add.items()):
            continue
        if not any(counts[c] < shots for c in add):
            continue
        for c, k in add.items():
            counts[c] += k
        chosen.append(int(i))
        if all(v == shots for v in counts.values()):
            break
    if not all(v == shots for v in counts.values()):
        raise InsufficientInstances(f"could not assemble a {shots}-shot episode: counts {counts}")
    chosen.sort()
    return Episode(chosen, np.stack([scenes[i].image for i in chosen]),
                   [list(scenes[i].truths) for i in chosen], targets, shots, seed)
