"""Post-processing of head outputs into final detections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, Box, as_box_array, iou_matrix
from .targets import decode_offsets
from .tensor import softmax


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: str = ""
    timestamp: str | None = None

    def to_json(self, class_name: str | None = None) -> dict:
        d = {"image_id": self.image_id, "class_id": self.class_id}
        if class_name is not None:
            d["class_name"] = class_name
        d.update(cx=self.box.cx, cy=self.box.cy, w=self.box.w, h=self.box.h, score=self.score)
        if self.timestamp is not None:
            d["timestamp"] = self.timestamp
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(Box(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])),
                   int(d["class_id"]), float(d["score"]), str(d.get("image_id", "")),
                   d.get("timestamp"))


def nms(boxes, scores, iou_threshold: float = 0.45) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (lower index first on ties); a box is
    kept unless it overlaps an already kept box by more than ``iou_threshold``.
    Returns kept indices in visiting order.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    b = as_box_array(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(b) != len(s):
        raise ValueError(f"{len(b)} boxes but {len(s)} scores")
    order = np.argsort(-s, kind="stable")
    keep = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        order = rest[iou_matrix(b[i:i + 1], b[rest])[0] <= iou_threshold]
    return keep


def decode_detections(class_logits, offsets, anchors, conf_threshold: float = 0.01,
                      nms_iou: float = 0.45, max_dets: int = 200, image_id: str = "",
                      timestamp: str | None = None) -> list[Detection]:
    """Turn one image's head outputs ``(A, C+1)`` / ``(A, 4)`` into detections."""
    a = as_box_array(anchors.boxes if isinstance(anchors, AnchorSet) else anchors)
    logits = np.asarray(class_logits, dtype=np.float64)
    if logits.shape[0] != len(a):
        raise ValueError(f"{logits.shape[0]} prediction rows for {len(a)} anchors")
    probs = softmax(logits)
    offsets = np.array(offsets, dtype=np.float64)
    # an untrained head can emit huge size offsets; exp() must stay finite
    offsets[:, 2:] = np.clip(offsets[:, 2:], -10, 10)
    found: list[tuple[float, int, int, np.ndarray]] = []
    for c in range(1, probs.shape[1]):
        idx = np.flatnonzero(probs[:, c] >= conf_threshold)
        if idx.size == 0:
            continue
        boxes = decode_offsets(offsets[idx], a[idx])
        valid = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
        idx, boxes = idx[valid], boxes[valid]
        for k in nms(boxes, probs[idx, c], nms_iou):
            found.append((float(probs[idx[k], c]), c, int(idx[k]), boxes[k]))
    # global ordering: score desc, then class, then anchor index
    found.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [Detection(Box(*map(float, box)), c, score, image_id, timestamp)
            for score, c, _, box in found[:max_dets]]


def detect(net, anchors: AnchorSet, image, conf_threshold: float = 0.01, nms_iou: float = 0.45,
           max_dets: int = 200, image_id: str = "", timestamp: str | None = None) -> list[Detection]:
    logits, offsets = net.forward_detect(image)
    if logits.ndim != 2:
        raise ValueError("detect takes a single (3, S, S) image; use detect_batch for batches")
    return decode_detections(logits, offsets, anchors, conf_threshold, nms_iou, max_dets,
                             image_id, timestamp)


def detect_batch(net, anchors: AnchorSet, images, image_ids=None, timestamps=None,
                 batch_size: int = 32, **kwargs) -> list[Detection]:
    """Run :func:`detect` over a stack of images, batching the forward pass."""
    images = np.asarray(images)
    n = len(images)
    image_ids = image_ids if image_ids is not None else [str(i) for i in range(n)]
    timestamps = timestamps if timestamps is not None else [None] * n
    if len(anchors) != net.config.num_anchors():
        raise ValueError(f"anchor set has {len(anchors)} boxes, network predicts {net.config.num_anchors()}")
    out = []
    for s in range(0, n, batch_size):
        logits, offsets = net.forward_detect(images[s:s + batch_size])
        for j in range(len(logits)):
            out.extend(decode_detections(logits[j], offsets[j], anchors, image_id=image_ids[s + j],
                                         timestamp=timestamps[s + j], **kwargs))
    return out
