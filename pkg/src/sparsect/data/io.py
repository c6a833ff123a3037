"""Dataset directories and line-delimited JSON detection files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..detector.inference import Detection
from .synthetic import Scene, SyntheticConfig

DATASET_FORMAT = "sparsect-dataset"
SUBSETS = ("source", "target", "test")


def export_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            rec = {"image_id": d.image_id, "class_id": int(d.class_id),
                   "confidence": float(d.confidence), "box": [float(v) for v in d.box]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def import_detections(path) -> List[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = tuple(float(v) for v in rec["box"])
                if len(box) != 4:
                    raise ValueError("box needs 4 coordinates")
                out.append(Detection(int(rec["class_id"]), float(rec["confidence"]), box, rec.get("image_id")))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from None
    return out


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_dataset(out_dir, subsets: Dict[str, Sequence[Scene]], meta: dict) -> Path:
    """Write ``<subset>/<index>.npy`` images plus ``manifest.json`` holding all truths."""
    out = Path(out_dir)
    manifest = dict(meta)
    manifest["format"] = DATASET_FORMAT
    manifest["subsets"] = {}
    for name, scenes in subsets.items():
        (out / name).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, scene in enumerate(scenes):
            rel = f"{name}/{i:06d}.npy"
            np.save(out / rel, np.asarray(scene.image, dtype=np.float64), allow_pickle=False)
            entries.append({"id": f"{name}/{i:06d}", "file": rel,
                            "truths": [[int(c), [float(v) for v in b]] for c, b in scene.truths]})
        manifest["subsets"][name] = {"count": len(entries),
                                     "objects": sum(len(e["truths"]) for e in entries),
                                     "scenes": entries}
    (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    return out / "manifest.json"


class Dataset:
    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json in {root}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path} is not a {DATASET_FORMAT} manifest")
        return cls(root, manifest)

    @property
    def source_classes(self) -> List[int]:
        return list(self.manifest["source_classes"])

    @property
    def target_classes(self) -> List[int]:
        return list(self.manifest["target_classes"])

    @property
    def config(self) -> SyntheticConfig:
        return SyntheticConfig.from_dict(self.manifest["config"])

    def ids(self, subset: str) -> List[str]:
        return [e["id"] for e in self.manifest["subsets"][subset]["scenes"]]

    def scenes(self, subset: str) -> List[Scene]:
        out = []
        for e in self.manifest["subsets"][subset]["scenes"]:
            image = np.load(self.root / e["file"], allow_pickle=False)
            out.append(Scene(image, [(int(c), tuple(b)) for c, b in e["truths"]]))
        return out
