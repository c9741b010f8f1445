"""Month-by-month category counts and dominant colours of detections."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .anchors import Box

# CSS colour values, in the order used to break distance ties
COLOR_TABLE = (
    ("black", (0, 0, 0)), ("white", (255, 255, 255)), ("gray", (128, 128, 128)),
    ("red", (255, 0, 0)), ("green", (0, 128, 0)), ("blue", (0, 0, 255)),
    ("yellow", (255, 255, 0)), ("orange", (255, 165, 0)), ("purple", (128, 0, 128)),
    ("pink", (255, 192, 203)), ("brown", (165, 42, 42)), ("plum", (221, 160, 221)),
    ("navy", (0, 0, 128)), ("teal", (0, 128, 128)), ("olive", (128, 128, 0)),
    ("beige", (245, 245, 220)),
)
COLOR_NAMES = tuple(name for name, _ in COLOR_TABLE)
_COLOR_RGB = np.array([rgb for _, rgb in COLOR_TABLE], dtype=np.float64) / 255.0
CSV_COLUMNS = ("year_month", "class", "count", "share", "dominant_color")


def bin_levels() -> np.ndarray:
    """Representative RGB of each of the 27 bins; bin index is ``r*9 + g*3 + b``.

    A bin stands for the level ``q/2`` per channel (0, 0.5 or 1) rather than its
    geometric centre, so saturated and white regions name as red, white and so on.
    """
    q = np.arange(3) / 2
    r, g, b = np.meshgrid(q, q, q, indexing="ij")
    return np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)


def nearest_color(rgb) -> str:
    d = ((_COLOR_RGB - np.asarray(rgb, dtype=np.float64)) ** 2).sum(axis=1)
    return COLOR_NAMES[int(np.argmin(d))]


_BIN_NAMES = tuple(nearest_color(c) for c in bin_levels())


def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """27-bin counts for RGB values in [0, 1] given as (3, ...) arrays."""
    q = np.minimum((np.asarray(pixels, dtype=np.float64) * 3).astype(np.int64), 2)
    q = np.maximum(q, 0).reshape(3, -1)
    return np.bincount(q[0] * 9 + q[1] * 3 + q[2], minlength=27)


def histogram_color(hist) -> str:
    """Name of the fullest bin (lowest bin index on ties)."""
    return _BIN_NAMES[int(np.argmax(hist))]


def dominant_color(image: np.ndarray, box: Box) -> tuple[str, np.ndarray]:
    """Colour name and 27-bin histogram of the pixels whose centres fall in ``box``.

    ``image`` is (3, H, W) in [0, 1] and ``box`` is normalized.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    x0, y0, x1, y1 = Box(*box).corners()
    if (x1 - x0) * w < 1 or (y1 - y0) * h < 1:
        raise ValueError(f"box {tuple(box)} is smaller than a pixel")
    cols = np.flatnonzero(((np.arange(w) + 0.5) / w >= x0) & ((np.arange(w) + 0.5) / w < x1))
    rows = np.flatnonzero(((np.arange(h) + 0.5) / h >= y0) & ((np.arange(h) + 0.5) / h < y1))
    if cols.size == 0 or rows.size == 0:
        raise ValueError(f"box {tuple(box)} does not cover any pixel of the image")
    hist = color_histogram(image[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1])
    return histogram_color(hist), hist


def year_month(timestamp: str) -> str:
    """UTC calendar month ``YYYY-MM`` of an ISO-8601 date or datetime."""
    ts = timestamp.strip()
    if len(ts) == 10:
        return dt.date.fromisoformat(ts).strftime("%Y-%m")
    t = dt.datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if t.tzinfo is not None:
        t = t.astimezone(dt.timezone.utc)
    return t.strftime("%Y-%m")


@dataclass
class TrendRow:
    year_month: str
    class_id: int
    class_name: str
    count: int
    share: float
    dominant_color: str = ""
    color_histogram: list[int] = field(default_factory=list)


@dataclass
class TrendTable:
    rows: list[TrendRow]
    skipped_no_timestamp: int = 0
    below_min_score: int = 0
    min_score: float = 0.5

    def __len__(self):
        return len(self.rows)

    def row(self, year_month: str, class_id: int) -> TrendRow | None:
        return next((r for r in self.rows if r.year_month == year_month and r.class_id == class_id), None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.year_month, r.class_name, r.count, f"{r.share:.6f}", r.dominant_color])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"min_score": self.min_score, "skipped_no_timestamp": self.skipped_no_timestamp,
                "below_min_score": self.below_min_score,
                "rows": [r.__dict__ for r in self.rows]}

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as f:
            f.write(self.to_csv())
        if json_path is not None:
            with open(json_path, "w") as f:
                json.dump(self.to_json(), f, indent=2, sort_keys=True)
                f.write("\n")


def aggregate_monthly(detections, min_score: float = 0.5, class_names: Sequence[str] | None = None,
                      images: Mapping[str, np.ndarray] | Callable[[str], np.ndarray] | None = None
                      ) -> TrendTable:
    """Count detections scoring at least ``min_score`` per (month, class).

    Detections without a timestamp are skipped and counted.  When ``images``
    (image id -> (3, H, W) array) is given, each row also gets the colour
    histogram summed over its boxes and the resulting dominant colour.
    """
    get = images if callable(images) or images is None else images.__getitem__
    counts: dict[tuple[str, int], int] = {}
    hists: dict[tuple[str, int], np.ndarray] = {}
    skipped = below = 0
    for d in detections:
        if d.score < min_score:
            below += 1
            continue
        if not d.timestamp:
            skipped += 1
            continue
        key = (year_month(d.timestamp), int(d.class_id))
        counts[key] = counts.get(key, 0) + 1
        if get is not None:
            _, h = dominant_color(get(d.image_id), d.box)
            hists[key] = hists.get(key, 0) + h
    totals: dict[str, int] = {}
    for (month, _), n in counts.items():
        totals[month] = totals.get(month, 0) + n
    rows = []
    for key in sorted(counts):
        month, cid = key
        name = class_names[cid - 1] if class_names else str(cid)
        hist = hists.get(key)
        rows.append(TrendRow(month, cid, name, counts[key], counts[key] / totals[month],
                             histogram_color(hist) if hist is not None else "",
                             [int(v) for v in hist] if hist is not None else []))
    return TrendTable(rows, skipped, below, min_score)
