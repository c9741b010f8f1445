"""Command line entry point: ``cdssd <subcommand> [options]``.

Every subcommand writes into its ``--out`` directory, including a
``manifest.json`` describing the run.  All randomness derives from ``--seed``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import AnchorSet, anchor_set_from_dict, compute_aspect_ratio_bins, generate_default_boxes
from .augment import AugmentConfig
from .data import (SHAPE_CLASSES, ClassMap, load_annotations, read_image, write_synth_dataset)
from .evaluate import as_ground_truths, coco_map, evaluate, format_report, gts_from_annotations
from .inference import Detection, detect_batch
from .net import Network, NetworkConfig
from .tensor import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingAborted, finetune, pretrain, targets_from_annotations, write_log
from .trends import aggregate_monthly

log = logging.getLogger("cdssd")

SUBCOMMANDS = ("synth-data", "anchors-stats", "pretrain", "train", "detect", "eval", "trends")

# desk profile; a --config file is merged over this section by section
DEFAULT_CONFIG = {
    "classes": list(SHAPE_CLASSES),
    "network": NetworkConfig().to_dict(),
    "anchors": {"scales": [0.2, 0.35, 0.5], "shape_rule": "sqrt"},
    "pretrain": {"batch_size": 16, "momentum": 0.9, "weight_decay": 5e-4,
                 "schedule": [[1e-3, 300], [1e-4, 300]]},
    "finetune": {"batch_size": 16, "momentum": 0.9, "weight_decay": 5e-4,
                 "schedule": [[2e-2, 3500], [2e-3, 1500]], "neg_ratio": 2.0,
                 "match_threshold": 0.5},
    "augment": AugmentConfig().to_dict(),
    "inference": {"conf_threshold": 0.01, "nms_iou": 0.45, "max_dets": 200, "batch_size": 32},
    "eval": {"iou_min": 0.5, "coco": False},
    "trends": {"min_score": 0.5},
}


class CliError(Exception):
    """Runtime failure reported as a one-line diagnostic with exit code 1."""


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    unknown = set(user) - set(cfg)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    for key, val in user.items():
        if isinstance(cfg[key], dict) and isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def parse_schedule(text: str) -> list[list[float]]:
    """``"1e-3:1500,1e-4:1500"`` -> ``[[0.001, 1500], [0.0001, 1500]]``."""
    try:
        out = []
        for part in text.split(","):
            lr, steps = part.split(":")
            out.append([float(lr), int(steps)])
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad schedule {text!r}, expected lr:steps[,lr:steps...]")


def _class_map(cfg: dict) -> ClassMap:
    classes = cfg["classes"]
    if classes == "fashion":
        return ClassMap.fashion()
    return ClassMap(classes)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_id(args: argparse.Namespace, cfg: dict) -> str:
    ident = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "verbose", "workers")}
    blob = json.dumps({"args": ident, "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _manifest(args, cfg, inputs: dict, outputs: list[str], timings: dict) -> dict:
    return {"subcommand": args.command, "version": __version__, "run_id": _run_id(args, cfg),
            "config_path": args.config, "seed": args.seed, "inputs": inputs,
            "outputs": sorted(outputs), "config": cfg, "timings_s": timings}


def _load_dataset(path: str, cm: ClassMap):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"annotation file {path} not found")
    anns = load_annotations(p, cm)
    if not anns:
        raise CliError(f"{path} holds no annotations")
    images = np.stack([read_image(p.parent / a.image_path) for a in anns])
    return anns, images


def _image_dir(path: Path):
    files = sorted(f for f in path.iterdir() if f.suffix.lower() in (".ppm", ".pgm", ".png"))
    if not files:
        raise CliError(f"no images in {path}")
    return files, np.stack([read_image(f) for f in files])


def _save_model(out: Path, net: Network, cfg: dict, anchors: AnchorSet | None) -> None:
    save_checkpoint(out / "model.ckpt", net.state_dict())
    _write_json(out / "network.json", {
        "mode": net.mode, "network": net.config.to_dict(), "classes": cfg["classes"],
        "anchors": anchors.to_dict() if anchors is not None else None,
        "shape_rule": cfg["anchors"]["shape_rule"]})


def load_model(model_dir: str | Path):
    """Network (with weights) and anchor set saved by ``pretrain``/``train``."""
    d = Path(model_dir)
    try:
        meta = json.loads((d / "network.json").read_text())
        state = load_checkpoint(d / "model.ckpt")
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load model from {d}: {exc}") from exc
    net = Network(NetworkConfig.from_dict(meta["network"]))
    if meta["mode"] == "detect":
        net.to_detect_mode()
    net.load_state_dict(state)
    anchors = anchor_set_from_dict(meta["anchors"], meta.get("shape_rule", "sqrt")) if meta["anchors"] else None
    return net, anchors, meta


def _progress(every: int):
    def report(row):
        if row["step"] % every == 0:
            log.info("step %d %s lr=%g loss=%.4f", row["step"], row["phase"], row["lr"], row["total"])
    return report


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth_data(args, cfg, out: Path):
    classes = cfg["classes"] if isinstance(cfg["classes"], list) else list(SHAPE_CLASSES)
    if any(c not in SHAPE_CLASSES for c in classes):
        raise CliError(f"synth-data renders only {SHAPE_CLASSES}, config asks for {classes}")
    info = write_synth_dataset(out, args.count, args.image_size, args.seed, args.test_fraction,
                               classes=classes, month_range=(args.month_from, args.month_to))
    _write_json(out / "dataset.json", dict(info, image_size=args.image_size, seed=args.seed))
    return {}, ["images/", "train.jsonl", "test.jsonl", "dataset.json"]


def cmd_anchors_stats(args, cfg, out: Path):
    cm = _class_map(cfg)
    anns = load_annotations(args.data, cm)
    boxes = np.concatenate([a.boxes() for a in anns]) if anns else np.zeros((0, 4))
    if len(boxes) == 0:
        raise CliError(f"{args.data} holds no boxes")
    ncfg = NetworkConfig.from_dict(cfg["network"])
    ratios = compute_aspect_ratio_bins(boxes, ncfg.boxes_per_cell)
    anchors = generate_default_boxes(ncfg.anchor_layout(cfg["anchors"]["scales"]), ratios,
                                     cfg["anchors"]["shape_rule"])
    ar = boxes[:, 2] / boxes[:, 3]
    stats = {"num_boxes": int(len(boxes)), "aspect_ratio_bins": ratios,
             "aspect_ratio_quantiles": {str(q): float(np.quantile(ar, q)) for q in (0.1, 0.25, 0.5, 0.75, 0.9)},
             "num_anchors": len(anchors), "anchors": anchors.to_dict()}
    _write_json(out / "anchors.json", stats)
    print(json.dumps({k: stats[k] for k in ("num_boxes", "aspect_ratio_bins", "num_anchors")}))
    return {"data": args.data}, ["anchors.json"]


def cmd_pretrain(args, cfg, out: Path):
    src = Path(args.data)
    if src.is_dir():
        _, images = _image_dir(src)
    else:
        _, images = _load_dataset(args.data, _class_map(cfg))
    net = Network(NetworkConfig.from_dict(cfg["network"]), seed=args.seed)
    tcfg = TrainConfig(mode="pretrain", seed=args.seed, **cfg["pretrain"])
    res = pretrain(net, images, tcfg, progress=_progress(args.log_every))
    write_log(out / "pretrain_log.csv", res.log)
    _save_model(out, net, cfg, None)
    return {"data": args.data}, ["model.ckpt", "network.json", "pretrain_log.csv"]


def cmd_train(args, cfg, out: Path):
    cm = _class_map(cfg)
    anns, images = _load_dataset(args.data, cm)
    if args.init:
        net, _, meta = load_model(args.init)
        if meta["mode"] != "pretrain":
            raise CliError(f"{args.init} is not a pretrain checkpoint")
        cfg["network"] = net.config.to_dict()
    else:
        net = Network(NetworkConfig.from_dict(cfg["network"]), seed=args.seed)
    if net.config.num_classes != len(cm):
        raise CliError(f"network predicts {net.config.num_classes} classes, class map has {len(cm)}")
    net.to_detect_mode(seed=args.seed)
    boxes = np.concatenate([a.boxes() for a in anns])
    ratios = compute_aspect_ratio_bins(boxes, net.config.boxes_per_cell)
    anchors = generate_default_boxes(net.config.anchor_layout(cfg["anchors"]["scales"]), ratios,
                                     cfg["anchors"]["shape_rule"])
    tcfg = TrainConfig(mode="detect", seed=args.seed, augment=AugmentConfig(**cfg["augment"]),
                       **cfg["finetune"])
    res = finetune(net, images, targets_from_annotations(anns), anchors, tcfg,
                   progress=_progress(args.log_every))
    write_log(out / "train_log.csv", res.log)
    _save_model(out, net, cfg, anchors)
    return {"data": args.data, "init": args.init}, ["model.ckpt", "network.json", "train_log.csv"]


def _chunks(n: int, size: int):
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def cmd_detect(args, cfg, out: Path):
    net, anchors, meta = load_model(args.model)
    if net.mode != "detect" or anchors is None:
        raise CliError(f"{args.model} is not a trained detector")
    cfg["classes"] = meta["classes"]
    src = Path(args.data)
    if src.is_dir():
        files, images = _image_dir(src)
        ids, stamps = [f.stem for f in files], [None] * len(files)
    else:
        anns, images = _load_dataset(args.data, _class_map(cfg))
        ids, stamps = [a.image_id for a in anns], [a.timestamp for a in anns]
    inf = dict(cfg["inference"])
    bs = inf.pop("batch_size")

    def run(span):
        s, e = span
        return detect_batch(net, anchors, images[s:e], ids[s:e], stamps[s:e], batch_size=bs, **inf)

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        dets = [d for part in pool.map(run, _chunks(len(images), bs)) for d in part]
    cm = _class_map(cfg)
    with open(out / "detections.jsonl", "w", newline="\n") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json(cm.name_of(d.class_id)), sort_keys=True) + "\n")
    return {"model": args.model, "data": args.data}, ["detections.jsonl"]


def read_detections(path) -> list[Detection]:
    with open(path) as fh:
        return [Detection.from_json(json.loads(line)) for line in fh if line.strip()]


def cmd_eval(args, cfg, out: Path):
    cm = _class_map(cfg)
    dets = read_detections(args.detections)
    anns = load_annotations(args.annotations, cm)
    gts = as_ground_truths(gts_from_annotations(anns))
    iou_min = cfg["eval"]["iou_min"]
    report = evaluate(dets, gts, cm.names, iou_min)
    if cfg["eval"].get("coco"):
        present = [cm.id_of(n) for n in report["per_class"]]
        report["coco_mAP"] = coco_map(dets, gts, present)
    _write_json(out / "report.json", report)
    text = format_report(report, cm.names, method=args.method, data=args.split_name)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return {"detections": args.detections, "annotations": args.annotations}, ["report.json", "report.txt"]


def cmd_trends(args, cfg, out: Path):
    cm = _class_map(cfg)
    dets = read_detections(args.detections)
    images = None
    if args.annotations:
        anns = load_annotations(args.annotations, cm)
        root = Path(args.annotations).parent
        paths = {a.image_id: root / a.image_path for a in anns}
        cache: dict = {}

        def images(image_id):
            if image_id not in cache:
                if image_id not in paths:
                    raise CliError(f"no image recorded for detection image id {image_id!r}")
                cache[image_id] = read_image(paths[image_id])
            return cache[image_id]

    table = aggregate_monthly(dets, cfg["trends"]["min_score"], cm.names, images)
    table.write(out / "trends.csv", out / "trends.json")
    return {"detections": args.detections, "annotations": args.annotations}, ["trends.csv", "trends.json"]


COMMANDS = {"synth-data": cmd_synth_data, "anchors-stats": cmd_anchors_stats, "pretrain": cmd_pretrain,
            "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval, "trends": cmd_trends}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config merged over the desk defaults")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for detect (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cdssd", description="Convolution-deconvolution single-shot detector")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic shapes dataset")
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--test-fraction", type=float, default=1 / 6)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--month-from", default="2018-01")
    p.add_argument("--month-to", default="2018-12")

    p = sub.add_parser("anchors-stats", parents=[common], help="aspect-ratio bins and anchor layout")
    p.add_argument("--data", required=True, help="annotation JSONL")

    for name, helptext in (("pretrain", "unsupervised autoencoder pretraining"),
                           ("train", "detection fine-tuning")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True,
                       help="annotation JSONL" + (" or image directory" if name == "pretrain" else ""))
        p.add_argument("--schedule", type=parse_schedule, help="lr:steps[,lr:steps...]")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--log-every", type=int, default=100)
        if name == "train":
            p.add_argument("--init", help="pretrain output directory (omit for random init)")

    p = sub.add_parser("detect", parents=[common], help="run a trained detector")
    p.add_argument("--model", required=True, help="train output directory")
    p.add_argument("--data", required=True, help="annotation JSONL or image directory")
    p.add_argument("--conf-threshold", type=float)
    p.add_argument("--nms-iou", type=float)

    p = sub.add_parser("eval", parents=[common], help="AP / mAP report")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--iou-min", type=float)
    p.add_argument("--classes", help="'fashion', or comma separated class names")
    p.add_argument("--method", default="CDSSD", help="label of the method column")
    p.add_argument("--split-name", default="test", help="label of the data column")

    p = sub.add_parser("trends", parents=[common], help="monthly category and colour trends")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", help="annotation JSONL locating the images (enables colours)")
    p.add_argument("--min-score", type=float)
    p.add_argument("--classes", help="'fashion', or comma separated class names")
    return parser


def _apply_overrides(args, cfg: dict) -> None:
    """Flags win over config values."""
    for section in ("pretrain", "finetune"):
        if args.command == ("pretrain" if section == "pretrain" else "train"):
            if getattr(args, "schedule", None):
                cfg[section]["schedule"] = args.schedule
            if getattr(args, "batch_size", None):
                cfg[section]["batch_size"] = args.batch_size
    if getattr(args, "conf_threshold", None) is not None:
        cfg["inference"]["conf_threshold"] = args.conf_threshold
    if getattr(args, "nms_iou", None) is not None:
        cfg["inference"]["nms_iou"] = args.nms_iou
    if getattr(args, "iou_min", None) is not None:
        cfg["eval"]["iou_min"] = args.iou_min
    if getattr(args, "min_score", None) is not None:
        cfg["trends"]["min_score"] = args.min_score
    if getattr(args, "classes", None):
        cfg["classes"] = "fashion" if args.classes == "fashion" else args.classes.split(",")


def _validate(args, cfg: dict) -> None:
    """Check the merged config before any work starts."""
    NetworkConfig.from_dict(cfg["network"])
    _class_map(cfg)
    AugmentConfig(**cfg["augment"])
    TrainConfig(mode="pretrain", **cfg["pretrain"])
    TrainConfig(mode="detect", **cfg["finetune"])
    if args.workers < 1:
        raise ValueError("--workers must be >= 1")
    if args.command == "synth-data" and (args.count < 1 or not 0 <= args.test_fraction < 1):
        raise ValueError("--count must be >= 1 and --test-fraction in [0, 1)")


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        _apply_overrides(args, cfg)
        _validate(args, cfg)
    except (CliError, ValueError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cdssd {args.command}: error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, cfg, out)
    except TrainingAborted as exc:
        _write_json(out / "abort.json", exc.record)
        print(f"cdssd {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"cdssd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    timings = {"total": round(time.perf_counter() - t0, 3)}
    _write_json(out / "manifest.json", _manifest(args, cfg, inputs, outputs, timings))
    return 0


if __name__ == "__main__":
    sys.exit(main())
