"""Command line: synth, pretrain, finetune, eval, gradcheck and report.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from collections import defaultdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.io import Dataset, export_detections, import_detections, save_dataset
from .data.synthetic import InsufficientInstances, sample_episode
from .data.voc import VocParseError, load_voc_dir
from .detector.model import backbone_forward, heads_forward, split_background
from .detector.training import finetune, pretrain
from .gradcheck import DESK_SHAPES, SMALL_SHAPES, Shapes, run_suite
from .metrics import evaluate
from .numkit import NonFiniteError
from .pipeline import (
    ablation_flags,
    clean_report,
    detect_scenes,
    init_detector,
    init_sct,
    local_truths,
    score,
    synthesize,
)
from .sct import build_contextual_fields, sct_forward

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4

logger = logging.getLogger("sparsect")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


class RunLog:
    """Line-delimited JSON log in the output directory."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _prepare_out(out: str, cfg: dict, command: str, seed: int) -> RunLog:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(_dump(cfg), encoding="utf-8")
        log = RunLog(path / "log.ndjson")
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    digest = config_mod.config_hash(cfg)
    log({"event": "start", "command": command, "seed": seed, "config_hash": digest})
    logger.info("%s: config %s", command, digest[:12])
    return log


def _config(args, overrides: Optional[dict] = None) -> dict:
    try:
        return config_mod.load_config(args.config, overrides)
    except config_mod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _dataset(path: str) -> Dataset:
    if not Path(path).is_dir():
        raise UsageError(f"data directory {path} does not exist")
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"{path} has no manifest.json")
    try:
        return Dataset.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad dataset {path}: {exc}") from None


def _checkpoint(path: str, **expect):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path, **expect)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def _scenes(ds: Dataset, subset: str):
    try:
        return ds.scenes(subset), ds.ids(subset)
    except (KeyError, OSError, ValueError) as exc:
        raise DataError(f"cannot read subset {subset!r}: {exc}") from None


def cmd_synth(args) -> int:
    cfg = _config(args, {"data": {"split": args.split}} if args.split is not None else None)
    subsets, meta = synthesize(cfg, args.seed)
    log = _prepare_out(args.out, cfg, "synth", args.seed)
    try:
        save_dataset(args.out, subsets, meta)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    log({"event": "done", "counts": {k: len(v) for k, v in subsets.items()},
         "source_classes": meta["source_classes"], "target_classes": meta["target_classes"]})
    log.close()
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data)
    scenes, _ = _scenes(ds, "source")
    try:
        truths = local_truths(scenes, ds.source_classes)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    log = _prepare_out(args.out, cfg, "pretrain", args.seed)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    model = init_detector(cfg, len(ds.source_classes), rng)
    images = np.stack([s.image for s in scenes])
    try:
        model, _ = pretrain(model, images, truths, config_mod.schedule(cfg, "pretrain"), seed=args.seed,
                            log=lambda r: log({"event": "iteration", **r}))
    except NonFiniteError as exc:
        log({"event": "diverged", "error": str(exc)})
        log.close()
        raise NumericFailure(str(exc)) from None
    meta = {"stage": "pretrain", "seed": args.seed, "split": ds.manifest.get("split"),
            "source_classes": ds.source_classes, "config_hash": config_mod.config_hash(cfg)}
    save_checkpoint(Path(args.out) / "checkpoint.json", detector=model, meta=meta)
    log({"event": "done"})
    log.close()
    return EXIT_OK


def _finetune_overrides(args) -> dict:
    if args.no_context and args.lam is not None:
        raise UsageError("--no-context conflicts with --lambda")
    if args.no_sparse and args.tau is not None:
        raise UsageError("--no-sparse conflicts with --tau")
    if args.gap and args.no_context:
        raise UsageError("--gap needs the context path; it conflicts with --no-context")
    sct, train, data = {}, {}, {}
    if args.lam is not None:
        sct["lam"] = args.lam
    if args.tau is not None:
        sct["tau"] = args.tau
    if args.gap:
        sct["focus"] = "gap"
    if args.shots is not None:
        train["shots"] = args.shots
    if args.train_heads:
        train["train_heads"] = True
    if args.split is not None:
        data["split"] = args.split
    return {k: v for k, v in (("sct", sct), ("train", train), ("data", data)) if v}


def cmd_finetune(args) -> int:
    overrides = _finetune_overrides(args)
    ds = _dataset(args.data)
    if args.split is None:
        overrides.setdefault("data", {})["split"] = ds.manifest.get("split")
    cfg = _config(args, overrides)
    if ds.manifest.get("split") != cfg["data"]["split"]:
        raise UsageError(f"dataset holds split {ds.manifest.get('split')}, "
                         f"configuration asks for split {cfg['data']['split']}")
    ck = _checkpoint(args.checkpoint, expect_anchors=config_mod.anchor_config(cfg),
                     expect_classes=len(ds.source_classes))
    if ck.detector is None:
        raise DataError("checkpoint has no detector")
    pool, pool_ids = _scenes(ds, "target")
    shots = cfg["train"]["shots"]
    try:
        episode = sample_episode(pool, ds.target_classes, shots, args.seed)
    except InsufficientInstances as exc:
        raise DataError(str(exc)) from None
    if any(c in ds.source_classes for t in episode.truths for c, _ in t):
        raise DataError("episode contains source-class instances")
    truths = local_truths(episode.truths, ds.target_classes)
    flags = ablation_flags(cfg, context=not args.no_context, sparse=not args.no_sparse)
    log = _prepare_out(args.out, cfg, "finetune", args.seed)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    sct = flags.apply(init_sct(cfg, ck.detector, len(ds.target_classes), rng))
    fields = [build_contextual_fields(*_prior(ck.detector, img), sct.kernels, sct.feature_scales)
              for img in episode.images]
    tau = sct.effective_tau(fields[0].d_q)
    log({"event": "episode", "scenes": [pool_ids[i] for i in episode.scene_indices], "shots": shots,
         "flags": flags.name, "lam": sct.lam, "tau_effective": tau, "focus": sct.focus,
         "relations": "dense" if tau == 0 else "sparse"})
    try:
        result = finetune(ck.detector, sct, episode.images, truths, config_mod.schedule(cfg, "finetune"),
                          flags, seed=args.seed, log=lambda r: log({"event": "iteration", **r}))
    except NonFiniteError as exc:
        log({"event": "diverged", "error": str(exc)})
        log.close()
        raise NumericFailure(str(exc)) from None
    density = _relation_density(result, episode.images)
    log({"event": "relations", "nonzero_fraction": density, "fallback_rows": result.fallback_rows})
    meta = {"stage": "finetune", "seed": args.seed, "split": cfg["data"]["split"], "shot": shots,
            "flags": flags.name, "source_classes": ds.source_classes,
            "target_classes": ds.target_classes, "config_hash": config_mod.config_hash(cfg)}
    save_checkpoint(Path(args.out) / "checkpoint.json", detector=result.model, sct=result.sct, meta=meta)
    log({"event": "done"})
    log.close()
    return EXIT_OK


def _prior(model, image):
    feats = backbone_forward(image, model)
    prior, _ = split_background(heads_forward(feats, model).logits, model)
    return prior, feats


def _relation_density(result, images) -> float:
    nonzero = total = 0
    for img in images:
        prior, feats = _prior(result.model, img)
        fields = build_contextual_fields(prior, feats, result.sct.kernels, result.sct.feature_scales)
        _, trace = sct_forward(prior.scores, fields, result.sct)
        nonzero += int(np.count_nonzero(trace.r))
        total += trace.r.size
    return nonzero / total


def _write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    classes = sorted(report["per_class_ap"], key=lambda c: (len(c), c))
    header = ["split", "shot", "seed", "map50", "map", "runtime_ms"] + [f"ap50_{c}" for c in classes]
    row = [report["split"], report["shot"], report["seed"], report["map50"], report["map"],
           report["runtime_ms"]] + [report["per_class_ap"][c] for c in classes]
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerow(["" if v is None else v for v in row])


def _voc_truths(voc_dir: str, classes: Optional[List[str]]):
    try:
        annotations = load_voc_dir(voc_dir)
    except VocParseError as exc:
        raise DataError(str(exc)) from None
    except OSError as exc:
        raise UsageError(str(exc)) from None
    names = classes or sorted({o.name for a in annotations for o in a.objects})
    index = {n: i for i, n in enumerate(names)}
    items = []
    for a in annotations:
        for o in a.objects:
            if o.name not in index:
                raise DataError(f"{a.filename}: class {o.name!r} is not in the class list")
            items.append((a.image_id, index[o.name], o.normalized(a.width, a.height), o.difficult))
    return items, names


def cmd_eval(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    iou = cfg["eval"]["iou_threshold"]
    split = shot = None
    if args.voc_dir:
        if not args.detections:
            raise UsageError("--voc-dir needs --detections")
        items, _ = _voc_truths(args.voc_dir, args.classes.split(",") if args.classes else None)
        detections = _import(args.detections)
        full = clean_report(evaluate(detections, items, iou))
        report = {"per_class_ap": full["per_class_ap"], "map50": full["map50"], "map": full["map"]}
        log = _prepare_out(args.out, cfg, "eval", args.seed)
    else:
        if not args.data:
            raise UsageError("eval needs --data or --voc-dir")
        ds = _dataset(args.data)
        split = ds.manifest.get("split")
        if args.detections:
            subset = args.subset or "test"
            detections = _import(args.detections)
        elif args.checkpoint:
            ck = _checkpoint(args.checkpoint, expect_anchors=config_mod.anchor_config(cfg),
                             expect_classes=len(ds.source_classes))
            if ck.detector is None:
                raise DataError("checkpoint has no detector")
            subset = args.subset or ("test" if ck.sct is not None else "source")
            shot = ck.meta.get("shot")
        else:
            raise UsageError("eval needs --checkpoint or --detections")
        classes = ds.source_classes if subset == "source" else ds.target_classes
        scenes, ids = _scenes(ds, subset)
        try:
            truths = local_truths(scenes, classes)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        log = _prepare_out(args.out, cfg, "eval", args.seed)
        if not args.detections:
            sct = ck.sct if subset != "source" else None
            detections = detect_scenes(ck.detector, sct, [s.image for s in scenes], ids,
                                       config_mod.nms_config(cfg))
            export_detections(detections, Path(args.out) / "detections.ndjson")
        full = score(detections, truths, ids, iou)
        report = {"per_class_ap": full["per_class_ap"], "map50": full["map50"], "map": full["map"]}
    report.update(split=split, shot=shot, seed=args.seed,
                  runtime_ms=round((time.perf_counter() - t0) * 1e3, 3))
    _write_report(Path(args.out), report)
    log({"event": "done", "map50": report["map50"], "map": report["map"]})
    log.close()
    print(json.dumps({"map50": report["map50"], "map": report["map"]}, sort_keys=True))
    return EXIT_OK


def _import(path: str):
    if not Path(path).is_file():
        raise UsageError(f"detections file {path} does not exist")
    try:
        return import_detections(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _parse_shapes(text: str) -> Shapes:
    if text == "desk":
        return DESK_SHAPES
    if text == "small":
        return SMALL_SHAPES
    try:
        values = [int(v) for v in text.split(",")]
        if len(values) != len(Shapes._fields):
            raise ValueError
        shapes = Shapes(*values)
    except ValueError:
        raise UsageError("--shapes takes 'desk', 'small' or D_p,D_q,D_f,C_s,C_t") from None
    if min(shapes) < 1:
        raise UsageError("shapes must be positive")
    return shapes


def cmd_gradcheck(args) -> int:
    shapes = _parse_shapes(args.shapes)
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    worst = run_suite(range(args.seed, args.seed + args.seeds), shapes)
    failed = False
    for name in sorted(worst):
        rep = worst[name]
        ok = rep.error <= GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{name:32s} {rep.error:.3e} skipped={rep.skipped} {'ok' if ok else 'FAIL'}")
    print(f"max relative error {max(r.error for r in worst.values()):.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return EXIT_NUMERIC if failed else EXIT_OK


def aggregate_reports(reports: Sequence[dict]) -> List[dict]:
    """Mean and median mAP50/mAP for every (split, shot) cell."""
    cells = defaultdict(list)
    for r in reports:
        cells[(r.get("split"), r.get("shot"))].append(r)
    rows = []
    for (split, shot), runs in sorted(cells.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        row = {"split": split, "shot": shot, "n_runs": len(runs)}
        for metric in ("map50", "map"):
            vals = [r[metric] for r in runs if r.get(metric) is not None]
            row[f"{metric}_mean"] = statistics.fmean(vals) if vals else None
            row[f"{metric}_median"] = statistics.median(vals) if vals else None
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    reports = []
    for d in args.runs:
        path = Path(d) / "report.json" if Path(d).is_dir() else Path(d)
        if not path.is_file():
            raise UsageError(f"no report.json in {d}")
        try:
            reports.append(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from None
    rows = aggregate_reports(reports)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            fields = ["split", "shot", "n_runs", "map50_mean", "map50_median", "map_mean", "map_median"]
            writer = csv.DictWriter(fh, fields, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: "" if row[k] is None else row[k] for k in fields})
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    shots = sorted({r["shot"] for r in rows if r["shot"] is not None})
    splits = sorted({r["split"] for r in rows if r["split"] is not None})
    if shots and splits:
        cell = {(r["split"], r["shot"]): r["map50_mean"] for r in rows}
        print("split " + " ".join(f"{s:>7}-shot" for s in shots))
        for sp in splits:
            vals = (cell.get((sp, s)) for s in shots)
            print(f"{sp!s:5} " + " ".join(f"{'-':>12}" if v is None else f"{v:12.4f}" for v in vals))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config with data/anchors/sct/train/eval sections")
        p.add_argument("--seed", type=int, default=0)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate source/target/test scenes")
    common(p)
    p.add_argument("--split", type=int, choices=(1, 2, 3))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the detector on source scenes")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on an N-shot target episode")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-context", action="store_true", help="drop the multi-scale feature path (lambda = 0)")
    p.add_argument("--no-sparse", action="store_true", help="keep every relation (tau = 0)")
    p.add_argument("--gap", action="store_true", help="global average pooling instead of attention focus")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--shots", type=int, choices=(1, 2, 3, 5, 10))
    p.add_argument("--split", type=int, choices=(1, 2, 3))
    p.add_argument("--train-heads", action="store_true", help="also update the source classifier heads")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint or a detections file")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--subset", choices=("source", "target", "test"))
    p.add_argument("--voc-dir")
    p.add_argument("--detections")
    p.add_argument("--classes", help="comma-separated class names for VOC mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--shapes", default="desk", help="'desk', 'small' or D_p,D_q,D_f,C_s,C_t")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate run reports into a shots x splits table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
