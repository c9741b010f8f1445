"""Default-box geometry: boxes, IoU, aspect-ratio statistics and anchor grids.

Boxes are ``(cx, cy, w, h)`` in normalized image coordinates.  Vectorized
helpers take ``(N, 4)`` arrays in the same layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def clipped(self) -> "Box":
        x0, y0, x1, y1 = self.corners()
        if x0 >= 0 and y0 >= 0 and x1 <= 1 and y1 <= 1:
            return self
        x0, y0, x1, y1 = max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"box {self} does not intersect the unit square")
        return Box.from_corners(x0, y0, x1, y1)


def as_box_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = as_box_array(boxes)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(c[:, :2] + c[:, 2:]) / 2, c[:, 2:] - c[:, :2]], axis=1)


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clip to the unit square; rows already inside are returned untouched."""
    b = as_box_array(boxes)
    c = to_corners(b)
    inside = np.all(c[:, :2] >= 0, axis=1) & np.all(c[:, 2:] <= 1, axis=1)
    if inside.all():
        return b
    out = b.copy()
    out[~inside] = from_corners(np.clip(c[~inside], 0.0, 1.0))
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Jaccard overlap, shape ``(len(a), len(b))``."""
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou(a, b) -> float:
    return float(iou_matrix(as_box_array(a), as_box_array(b))[0, 0])


@dataclass(frozen=True)
class FeatureMapSpec:
    layer_index: int
    m: int
    n: int
    K: int
    scale: float
    box_pool_k: int = 1

    def __post_init__(self):
        if min(self.m, self.n, self.K) < 1:
            raise ValueError(f"m, n, K must be >= 1: {self}")
        if not 0 < self.scale <= 1:
            raise ValueError(f"scale must lie in (0, 1]: {self}")
        if self.box_pool_k not in (1, 2, 3):
            raise ValueError(f"box_pool_k must be 1, 2 or 3: {self}")

    @property
    def grid(self) -> tuple[int, int]:
        """Rows and columns after box pooling."""
        k = self.box_pool_k
        return -(-self.m // k), -(-self.n // k)

    @property
    def num_anchors(self) -> int:
        rows, cols = self.grid
        return rows * cols * self.K

    def to_dict(self) -> dict:
        return dict(layer_index=self.layer_index, m=self.m, n=self.n, K=self.K,
                    scale=self.scale, box_pool_k=self.box_pool_k)


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray
    layout: tuple[FeatureMapSpec, ...]
    aspect_ratios: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.boxes)

    def layer_slice(self, i: int) -> slice:
        start = sum(spec.num_anchors for spec in self.layout[:i])
        return slice(start, start + self.layout[i].num_anchors)

    def to_dict(self) -> dict:
        return {"aspect_ratios": list(self.aspect_ratios),
                "layout": [spec.to_dict() for spec in self.layout]}


def expected_anchor_count(layout: Sequence[FeatureMapSpec]) -> int:
    return sum(spec.num_anchors for spec in layout)


def compute_aspect_ratio_bins(gt_boxes, B: int) -> list[float]:
    """Mean aspect ratio (w/h) of each of ``B`` equal-count quantile bins.

    Ratios are stably sorted and split into ``B`` consecutive chunks whose sizes
    differ by at most one; the chunk means come out ascending.
    """
    boxes = as_box_array(gt_boxes)
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    if B > len(boxes):
        raise ValueError(f"cannot split {len(boxes)} boxes into {B} bins")
    if np.any(boxes[:, 3] <= 0):
        raise ValueError("zero-height box has no aspect ratio")
    if np.any(boxes[:, 2] <= 0):
        raise ValueError("box widths must be positive")
    ratios = np.sort(boxes[:, 2] / boxes[:, 3], kind="stable")
    return [float(chunk.mean()) for chunk in np.array_split(ratios, B)]


def generate_default_boxes(layout: Sequence[FeatureMapSpec], ratios: Sequence[float],
                           shape_rule: str = "sqrt", clip: bool = True) -> AnchorSet:
    """Place one box per (box-pooled cell, ratio) on every layer.

    ``shape_rule="sqrt"`` gives ``w = scale*sqrt(b)``, ``h = scale/sqrt(b)``.
    ``shape_rule="literal"`` takes height ``m*b*scale`` and width ``n*b*scale``
    measured in cells of the feature map, i.e. ``b*scale`` of the image on both
    sides; it is kept only for comparison.
    """
    if not layout:
        raise ValueError("anchor layout is empty")
    ratios = [float(r) for r in ratios]
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be non-empty and positive: {ratios}")
    if shape_rule not in ("sqrt", "literal"):
        raise ValueError(f"unknown shape_rule {shape_rule!r}")
    prev_scale = 0.0
    chunks = []
    for spec in layout:
        if spec.K != len(ratios):
            raise ValueError(f"layer {spec.layer_index}: K={spec.K} but {len(ratios)} ratios given")
        if spec.scale < prev_scale:
            raise ValueError("anchor scales must be non-decreasing with layer index")
        prev_scale = spec.scale
        rows, cols = spec.grid
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols,
                             indexing="ij")
        r = np.asarray(ratios)
        if shape_rule == "sqrt":
            w, h = spec.scale * np.sqrt(r), spec.scale / np.sqrt(r)
        else:
            h = (spec.m * r * spec.scale) / spec.m
            w = (spec.n * r * spec.scale) / spec.n
        shape = (rows, cols, len(r))
        layer = np.stack([np.broadcast_to(cx[..., None], shape), np.broadcast_to(cy[..., None], shape),
                          np.broadcast_to(w, shape), np.broadcast_to(h, shape)], axis=-1)
        chunks.append(layer.reshape(-1, 4))
    boxes = np.concatenate(chunks)
    if clip:
        boxes = clip_boxes(boxes)
    boxes.setflags(write=False)
    return AnchorSet(boxes=boxes, layout=tuple(layout), aspect_ratios=tuple(ratios))


def anchor_set_from_dict(d: dict, shape_rule: str = "sqrt") -> AnchorSet:
    layout = [FeatureMapSpec(**spec) for spec in d["layout"]]
    return generate_default_boxes(layout, d["aspect_ratios"], shape_rule=shape_rule)


def pixel_extent(box: Box, size: int) -> tuple[int, int, int, int]:
    """Integer pixel bounds ``(x0, y0, x1, y1)`` covered by a box on a square image."""
    x0, y0, x1, y1 = box.corners()
    return (max(0, math.floor(x0 * size)), max(0, math.floor(y0 * size)),
            min(size, math.ceil(x1 * size)), min(size, math.ceil(y1 * size)))
