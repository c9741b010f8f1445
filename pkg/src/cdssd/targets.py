"""Anchor matching, box offset coding, hard negative mining and the detection loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, as_box_array, clip_boxes, iou_matrix
from .tensor import (smooth_l1, smooth_l1_backward, softmax_cross_entropy,
                     softmax_cross_entropy_backward)


@dataclass
class MatchResult:
    matched_gt: np.ndarray      # (A,) gt index, -1 where unmatched
    class_target: np.ndarray    # (A,) 0 = background
    offset_target: np.ndarray   # (A, 4), zeros for negatives

    @property
    def is_positive(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def num_positives(self) -> int:
        return int(self.is_positive.sum())


@dataclass
class LossReport:
    localization: float
    confidence: float
    total: float
    num_positives: int
    num_mined_negatives: int
    num_available_negatives: int = 0
    grad_logits: np.ndarray | None = None
    grad_offsets: np.ndarray | None = None


def _anchor_boxes(anchors) -> np.ndarray:
    return as_box_array(anchors.boxes if isinstance(anchors, AnchorSet) else anchors)


def encode_offsets(gt, anchor) -> np.ndarray:
    """``((gx-ax)/aw, (gy-ay)/ah, ln(gw/aw), ln(gh/ah))``, row-wise for (N,4) inputs."""
    g, a = np.asarray(gt, dtype=np.float64), np.asarray(anchor, dtype=np.float64)
    if np.any(g[..., 2:] <= 0) or np.any(a[..., 2:] <= 0):
        raise ValueError("boxes must have positive width and height")
    return np.concatenate([(g[..., :2] - a[..., :2]) / a[..., 2:],
                           np.log(g[..., 2:] / a[..., 2:])], axis=-1)


def decode_offsets(t, anchor, clip: bool = True) -> np.ndarray:
    t, a = np.asarray(t, dtype=np.float64), np.asarray(anchor, dtype=np.float64)
    out = np.concatenate([a[..., :2] + t[..., :2] * a[..., 2:],
                          a[..., 2:] * np.exp(t[..., 2:])], axis=-1)
    if clip:
        out = clip_boxes(out).reshape(out.shape)
    return out


def match_anchors(anchors, gt_boxes, gt_classes, threshold: float = 0.5) -> MatchResult:
    """Assign ground truth to anchors.

    An anchor whose best IoU exceeds ``threshold`` takes that gt (lowest gt index
    on ties).  Then, in gt order, every gt claims its highest-IoU anchor not
    already claimed by an earlier gt (lowest anchor index on ties), even when the
    overlap is below the threshold.  Once every anchor is claimed, later gts get
    no forced anchor.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    a = _anchor_boxes(anchors)
    if len(a) == 0:
        raise ValueError("anchor set is empty")
    g = as_box_array(gt_boxes)
    cls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(cls) != len(g):
        raise ValueError("gt_boxes and gt_classes differ in length")
    if np.any(cls < 1):
        raise ValueError("gt classes must be >= 1 (0 is background)")
    matched = np.full(len(a), -1, dtype=np.int64)
    if len(g):
        ious = iou_matrix(a, g)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(len(a)), best_gt]
        above = best_iou > threshold
        matched[above] = best_gt[above]
        claimed = np.zeros(len(a), dtype=bool)
        for j in range(len(g)):
            if claimed.all():
                break
            col = np.where(claimed, -1.0, ious[:, j])
            best = int(col.argmax())
            claimed[best] = True
            matched[best] = j
    pos = matched >= 0
    class_target = np.zeros(len(a), dtype=np.int64)
    offsets = np.zeros((len(a), 4))
    if pos.any():
        class_target[pos] = cls[matched[pos]]
        offsets[pos] = encode_offsets(g[matched[pos]], a[pos])
    return MatchResult(matched, class_target, offsets)


def hard_negative_mine(conf_loss, match: MatchResult | np.ndarray, ratio: float = 2.0) -> np.ndarray:
    """Indices of the highest-loss negatives, ``floor(ratio * positives)`` of them.

    With no positives the single worst negative is returned so background still
    receives gradient.  Ties go to the lower anchor index.
    """
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    positive = match.is_positive if isinstance(match, MatchResult) else np.asarray(match, bool)
    loss = np.asarray(conf_loss, dtype=np.float64)
    neg = np.flatnonzero(~positive)
    num_pos = int(positive.sum())
    want = int(np.floor(ratio * num_pos)) if num_pos else 1
    want = min(want, len(neg))
    if want == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-loss[neg], kind="stable")
    return neg[order[:want]]


def detection_loss(class_logits: np.ndarray, offsets: np.ndarray, match: MatchResult,
                   neg_ratio: float = 2.0, with_grad: bool = True) -> LossReport:
    """Smooth-L1 localization over positives plus softmax cross-entropy over
    positives and mined negatives, each divided by ``max(1, positives)``."""
    logits = np.asarray(class_logits)
    if logits.shape[0] != len(match.matched_gt) or offsets.shape[0] != len(match.matched_gt):
        raise ValueError(f"predictions cover {logits.shape[0]} anchors, match has {len(match.matched_gt)}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite class logits")
    pos = match.is_positive
    num_pos = int(pos.sum())
    norm = max(1, num_pos)
    ce = softmax_cross_entropy(logits, match.class_target)
    mined = hard_negative_mine(ce, match, neg_ratio)
    diff = offsets[pos] - match.offset_target[pos]
    loc = float(smooth_l1(diff).sum()) / norm
    conf = float(ce[pos].sum() + ce[mined].sum()) / norm
    report = LossReport(localization=loc, confidence=conf, total=loc + conf,
                        num_positives=num_pos, num_mined_negatives=len(mined),
                        num_available_negatives=int(len(pos) - num_pos))
    if with_grad:
        weight = np.zeros(len(pos), dtype=logits.dtype)
        weight[pos] = 1.0 / norm
        weight[mined] = 1.0 / norm
        used = np.flatnonzero(weight)
        glog = np.zeros_like(logits)
        glog[used] = softmax_cross_entropy_backward(weight[used], logits[used],
                                                    match.class_target[used])
        goff = np.zeros_like(offsets)
        goff[pos] = smooth_l1_backward(np.full_like(diff, 1.0 / norm), diff)
        report.grad_logits, report.grad_offsets = glog, goff
    return report
