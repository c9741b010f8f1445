"""Average precision, mAP and precision-at-recall reporting.

AP is the all-point interpolated area under the precision/recall curve
(precision made monotone from the right, integrated over every recall step).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .anchors import Box, as_box_array, iou_matrix

AP_METHOD = "all-point interpolated AP (VOC2010+)"
RECALL_LEVELS = (0.5, 0.7, 0.9)
_EPS = 1e-12

# per-class column order of the reference results table, two blocks of twelve
REPORT_CLASS_ORDER = (
    "jeans", "boot", "high-heels", "shorts", "sandal", "briefcase", "coat", "shirt", "brasseire",
    "swimwear", "suit", "miniskirt", "jacket", "dress", "sun-hat", "cowboy-hat", "umbrella",
    "glasses", "belt", "earrings", "handbag", "watch", "backpack", "suitcase",
)


@dataclass
class GroundTruth:
    box: Box
    class_id: int
    image_id: str


@dataclass
class PRCurve:
    class_id: int
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    num_gt: int
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def as_ground_truths(gts: Iterable) -> list[GroundTruth]:
    return [g if isinstance(g, GroundTruth) else GroundTruth(Box(*g[0]), int(g[1]), str(g[2]))
            for g in gts]


def gts_from_annotations(annotations) -> list[GroundTruth]:
    return [GroundTruth(o.box, o.class_id, a.image_id) for a in annotations for o in a.objects]


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def average_precision(dets, gts, class_id: int, iou_min: float = 0.5):
    """AP and PR curve for one class, or ``None`` if the class has no ground truth.

    Detections are ranked by descending score, ties by image id and then input
    order.  Each detection takes the highest-IoU still-unmatched ground truth of
    its class in the same image if that IoU is at least ``iou_min``.
    """
    gts = [g for g in as_ground_truths(gts) if g.class_id == class_id]
    if not gts:
        return None
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    gt_boxes = as_box_array([g.box for g in gts])
    matched = np.zeros(len(gts), dtype=bool)
    ranked = sorted(((d, i) for i, d in enumerate(dets) if d.class_id == class_id),
                    key=lambda t: (-t[0].score, t[0].image_id, t[1]))
    tp = np.zeros(len(ranked), dtype=bool)
    for r, (d, _) in enumerate(ranked):
        cand = [j for j in by_image.get(d.image_id, ()) if not matched[j]]
        if not cand:
            continue
        ious = iou_matrix(as_box_array(d.box), gt_boxes[cand])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_min:
            matched[cand[best]] = True
            tp[r] = True
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
    recall = ctp / len(gts)
    ap = interpolated_ap(recall, precision)
    scores = np.array([d.score for d, _ in ranked], dtype=np.float64)
    return ap, PRCurve(class_id, scores, precision, recall, ap, len(gts), tp)


def mean_ap(dets, gts, classes: Sequence[int], iou_min: float = 0.5) -> float:
    """Unweighted mean AP over the classes that have ground truth."""
    aps = [r[0] for r in (average_precision(dets, gts, c, iou_min) for c in classes) if r is not None]
    if not aps:
        raise ValueError("no class in `classes` has ground truth")
    return float(np.mean(aps))


def coco_map(dets, gts, classes: Sequence[int]) -> float:
    """mAP averaged over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([mean_ap(dets, gts, classes, t) for t in np.linspace(0.5, 0.95, 10)]))


def precision_at_recall(curve: PRCurve, recall_levels: Sequence[float] = RECALL_LEVELS) -> list[float]:
    """Best precision reached at any recall >= each level (0 if never reached)."""
    out = []
    for r in recall_levels:
        hit = curve.recall >= r - _EPS
        out.append(float(curve.precision[hit].max()) if hit.any() else 0.0)
    return out


def ap_above_recall(curve: PRCurve, min_recall: float = 0.7) -> float:
    """Mean interpolated precision over recall in ``[min_recall, 1]``."""
    if not 0 <= min_recall < 1:
        raise ValueError("min_recall must lie in [0, 1)")
    mrec = np.concatenate([[0.0], curve.recall, [1.0]])
    mpre = np.concatenate([[0.0], curve.precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    lo = np.maximum(mrec[:-1], min_recall)
    width = np.clip(mrec[1:] - lo, 0, None)
    return float(np.sum(width * mpre[1:]) / (1 - min_recall))


def evaluate(dets, gts, class_names: Sequence[str], iou_min: float = 0.5,
             recall_levels: Sequence[float] = RECALL_LEVELS) -> dict:
    """Full report: per-class AP, skipped classes, mAP and precision at recall."""
    gts = as_ground_truths(gts)
    per_class, skipped = {}, []
    for cid, name in enumerate(class_names, 1):
        res = average_precision(dets, gts, cid, iou_min)
        if res is None:
            skipped.append(name)
            continue
        ap, curve = res
        per_class[name] = {
            "class_id": cid, "ap": ap, "num_gt": curve.num_gt, "num_det": int(len(curve.scores)),
            "precision_at_recall": dict(zip(map(str, recall_levels), precision_at_recall(curve, recall_levels))),
            "ap_recall_ge_0.7": ap_above_recall(curve, 0.7),
        }
    if not per_class:
        raise ValueError("no class has ground truth")
    present = list(per_class.values())
    return {
        "ap_method": AP_METHOD,
        "iou_min": iou_min,
        "num_detections": len(dets),
        "num_ground_truth": len(gts),
        "mAP": float(np.mean([c["ap"] for c in present])),
        "per_class": per_class,
        "skipped_classes": skipped,
        "skipped_note": "classes without ground truth are excluded from the mean, not counted as 0",
        "precision_at_recall": {str(r): float(np.mean([c["precision_at_recall"][str(r)] for c in present]))
                                for r in recall_levels},
        "mAP_recall_ge_0.7": float(np.mean([c["ap_recall_ge_0.7"] for c in present])),
    }


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def _grid(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        lines.append(" | ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])
                     if len(r) > 1 else r[0])
        if k == 0:
            lines.append("-" * len(lines[-1]))
    return lines


def format_report(report: dict, class_names: Sequence[str], method: str = "CDSSD",
                  data: str = "test") -> str:
    """Aligned text: a per-class AP table in blocks of twelve columns and a
    precision-at-recall table, values in percent."""
    names = list(class_names)
    if set(names) == set(REPORT_CLASS_ORDER):
        names = list(REPORT_CLASS_ORDER)
    lines = [f"# {AP_METHOD}, IoU >= {report['iou_min']}",
             f"# mAP = {_fmt(report['mAP'])}"]
    if report["skipped_classes"]:
        lines.append("# skipped (no ground truth): " + ", ".join(report["skipped_classes"]))
    lines.append("")
    for start in range(0, len(names), 12):
        block = names[start:start + 12]
        header = ["method"] + block
        row = [method] + [_fmt(report["per_class"].get(n, {}).get("ap")) for n in block]
        lines.extend(_grid([header, row]))
        lines.append("")
    levels = list(report["precision_at_recall"])
    header = ["method", "data"] + [f"P@R{lvl}" for lvl in levels] + ["mAP@70%"]
    row = [method, data] + [_fmt(report["precision_at_recall"][lvl]) for lvl in levels] + \
        [_fmt(report["mAP_recall_ge_0.7"])]
    lines.append("# precision at recall level; mAP@70% = mean interpolated precision over recall >= 0.7")
    lines.extend(_grid([header, row]))
    return "\n".join(lines) + "\n"
