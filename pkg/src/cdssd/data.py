"""Annotations, image files and the synthetic shapes dataset."""
from __future__ import annotations

import calendar
import csv
import datetime as dt
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anchors import Box

FASHION_CATEGORIES = (
    "sandal", "high-heels", "boot", "jeans", "shorts", "swimwear", "brasseire", "shirt",
    "coat", "suit", "miniskirt", "jacket", "dress", "sun-hat", "cowboy-hat", "umbrella",
    "glasses", "belt", "earrings", "handbag", "watch", "backpack", "suitcase", "briefcase",
)
SHAPE_CLASSES = ("circle", "square", "triangle")


class ClassMap:
    """Ordered class names; ids start at 1, 0 is background."""

    def __init__(self, names: Iterable[str]):
        self.names = tuple(names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if not self.names:
            raise ValueError("class map is empty")
        self._ids = {name: i + 1 for i, name in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, ClassMap) and self.names == other.names

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None

    def name_of(self, class_id: int) -> str:
        if not 1 <= class_id <= len(self.names):
            raise ValueError(f"class id {class_id} outside [1, {len(self.names)}]")
        return self.names[class_id - 1]

    @classmethod
    def fashion(cls) -> "ClassMap":
        return cls(FASHION_CATEGORIES)

    @classmethod
    def shapes(cls) -> "ClassMap":
        return cls(SHAPE_CLASSES)


@dataclass
class ObjectAnnotation:
    class_name: str
    class_id: int
    box: Box


@dataclass
class Annotation:
    image_path: str
    image_id: str
    timestamp: str | None = None
    objects: list[ObjectAnnotation] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    def to_json(self) -> dict:
        d = {"image_path": self.image_path, "image_id": self.image_id}
        if self.timestamp is not None:
            d["timestamp"] = self.timestamp
        d["objects"] = [{"class": o.class_name, "cx": o.box.cx, "cy": o.box.cy,
                         "w": o.box.w, "h": o.box.h} for o in self.objects]
        return d


def _parse_date(value: str) -> str:
    dt.date.fromisoformat(value)
    return value


def parse_annotation(record: dict, class_map: ClassMap) -> Annotation:
    objects = []
    for obj in record.get("objects", []):
        name = obj["class"]
        box = Box(float(obj["cx"]), float(obj["cy"]), float(obj["w"]), float(obj["h"]))
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"box for {name!r} has non-positive size")
        objects.append(ObjectAnnotation(name, class_map.id_of(name), box.clipped()))
    ts = record.get("timestamp")
    return Annotation(image_path=str(record["image_path"]), image_id=str(record["image_id"]),
                      timestamp=_parse_date(ts) if ts is not None else None, objects=objects)


def load_annotations(path: str | Path, class_map: ClassMap) -> list[Annotation]:
    """Read a JSON Lines annotation file; errors carry the offending line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_annotation(json.loads(line), class_map))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_annotations(path: str | Path, annotations: Sequence[Annotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json(), separators=(", ", ": ")) + "\n")


def corners_to_box(xmin: float, xmax: float, ymin: float, ymax: float) -> Box:
    return Box.from_corners(xmin, ymin, xmax, ymax)


def convert_open_images(csv_path: str | Path, label_map_path: str | Path, class_map: ClassMap,
                        image_dir: str = "images", ext: str = ".jpg") -> list[Annotation]:
    """Build annotations from an Open Images box CSV (ImageID, LabelName, XMin,
    XMax, YMin, YMax) and a two-column ``label_name,class_name`` map file.
    Rows whose label is not in the map are skipped."""
    labels = {}
    with open(label_map_path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if len(row) >= 2 and not row[0].startswith("#"):
                labels[row[0].strip()] = row[1].strip()
    by_image: dict[str, list[ObjectAnnotation]] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            name = labels.get(row["LabelName"])
            if name is None:
                continue
            box = corners_to_box(float(row["XMin"]), float(row["XMax"]),
                                 float(row["YMin"]), float(row["YMax"]))
            by_image.setdefault(row["ImageID"], []).append(
                ObjectAnnotation(name, class_map.id_of(name), box.clipped()))
    return [Annotation(image_path=f"{image_dir}/{image_id}{ext}", image_id=image_id, objects=objs)
            for image_id, objs in by_image.items()]


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def _decode_pnm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError("not a binary PGM/PPM file")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, mx = int(width), int(height), int(maxval)
    if not 0 < mx < 65536 or w < 1 or h < 1:
        raise ValueError("bad PNM header")
    pos += 1  # single whitespace after maxval
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if mx > 255 else np.dtype("u1")
    count = w * h * chans
    if len(buf) - pos < count * dtype.itemsize:
        raise ValueError("truncated pixel data")
    px = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(h, w, chans)
    return px.astype(np.float32) / np.float32(mx)


def _decode_png(buf: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(buf)) as im:
        gray = im.mode in ("1", "L", "LA", "I", "I;16")
        px = np.asarray(im.convert("L" if gray else "RGB"), dtype=np.float32) / np.float32(255)
    return px[..., None] if gray else px


def read_image(path: str | Path) -> np.ndarray:
    """Load a PPM/PGM (or PNG via Pillow) as a float32 (3, H, W) array in [0, 1].
    Grayscale images are replicated to three channels."""
    path = Path(path)
    try:
        buf = path.read_bytes()
        if buf[:2] in (b"P5", b"P6"):
            px = _decode_pnm(buf)
        elif buf[:8] == b"\x89PNG\r\n\x1a\n":
            px = _decode_png(buf)
        else:
            raise ValueError("unsupported image format")
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if px.shape[-1] == 1:
        px = np.repeat(px, 3, axis=-1)
    return np.ascontiguousarray(px.transpose(2, 0, 1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as binary PPM, or PNG by extension."""
    path = Path(path)
    px = to_uint8(image).transpose(1, 2, 0)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(px, "RGB").save(path)
        return
    h, w = px.shape[:2]
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes())


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

def _shape_mask(kind: str, size: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    px, py = xx + 0.5, yy + 0.5
    if kind == "square":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == "circle":
        cx, cy, r = x0 + w / 2, y0 + h / 2, w / 2
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base along the bottom edge of the box
        cx = x0 + w / 2
        t = (py - y0) / h
        return (py >= y0) & (py <= y0 + h) & (np.abs(px - cx) <= t * w / 2)
    raise ValueError(f"unknown shape {kind!r}")


def mask_box(mask: np.ndarray) -> Box:
    """Normalized bounding box of the pixels set in a square mask."""
    size = mask.shape[0]
    ys, xs = np.nonzero(mask)
    return Box.from_corners(xs.min() / size, ys.min() / size, (xs.max() + 1) / size,
                            (ys.max() + 1) / size)


def _month_range(start: str, end: str) -> list[tuple[int, int]]:
    y0, m0 = map(int, start.split("-"))
    y1, m1 = map(int, end.split("-"))
    out = []
    y, m = y0, m0
    while (y, m) <= (y1, m1):
        out.append((y, m))
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    if not out:
        raise ValueError(f"empty month range {start}..{end}")
    return out


def synth_shapes(count: int, image_size: int = 96, seed: int = 0,
                 classes: Sequence[str] = SHAPE_CLASSES,
                 month_range: tuple[str, str] = ("2018-01", "2018-12"),
                 max_overlap: float = 0.3, max_objects: int = 4):
    """Render ``count`` noisy images with 1-``max_objects`` filled shapes each.

    Returns ``(images, annotations)``: images is a uint8 array (count, 3, S, S)
    and every annotation box is the exact pixel extent of its shape's mask.
    Image paths are ``images/{image_id}.ppm`` relative to a dataset root.
    """
    from .anchors import iou

    if count < 1:
        raise ValueError("count must be >= 1")
    class_map = ClassMap(classes)
    rng = np.random.default_rng(seed)
    months = _month_range(*month_range)
    images = np.empty((count, 3, image_size, image_size), dtype=np.uint8)
    annotations = []
    lo, hi = max(2, int(round(0.1 * image_size))), int(round(0.5 * image_size))
    for idx in range(count):
        base = rng.uniform(0.2, 0.8, size=3)
        canvas = base[:, None, None] + rng.normal(0, 0.06, size=(3, image_size, image_size))
        objects: list[ObjectAnnotation] = []
        target = int(rng.integers(1, max_objects + 1))
        attempts = 0
        while len(objects) < target and attempts < 100:
            attempts += 1
            kind = classes[int(rng.integers(len(classes)))]
            w = int(rng.integers(lo, hi + 1))
            h = w if kind in ("circle", "square") else int(np.clip(
                round(w * rng.uniform(0.6, 1.6)), lo, hi))
            x0 = int(rng.integers(0, image_size - w + 1))
            y0 = int(rng.integers(0, image_size - h + 1))
            mask = _shape_mask(kind, image_size, x0, y0, w, h)
            if not mask.any():
                continue
            box = mask_box(mask)
            if any(iou(box, o.box) > max_overlap for o in objects):
                continue
            # keep fill colours clearly apart from the background
            while True:
                color = rng.uniform(0, 1, size=3)
                if np.abs(color - base).max() > 0.3:
                    break
            canvas[:, mask] = color[:, None] + rng.normal(0, 0.03, size=(3, int(mask.sum())))
            objects.append(ObjectAnnotation(kind, class_map.id_of(kind), box))
        year, month = months[int(rng.integers(len(months)))]
        day = int(rng.integers(1, calendar.monthrange(year, month)[1] + 1))
        images[idx] = to_uint8(np.clip(canvas, 0, 1))
        image_id = f"{seed}_{idx:05d}"
        annotations.append(Annotation(image_path=f"images/{image_id}.ppm", image_id=image_id,
                                      timestamp=f"{year:04d}-{month:02d}-{day:02d}", objects=objects))
    return images, annotations


def write_synth_dataset(out_dir: str | Path, count: int, image_size: int = 96, seed: int = 0,
                        test_fraction: float = 0.2, **kwargs) -> dict:
    """Render a dataset to ``out_dir`` with ``images/``, ``train.jsonl`` and
    ``test.jsonl``; the last ``round(count * test_fraction)`` images form the test split."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, anns = synth_shapes(count, image_size, seed, **kwargs)
    for img, ann in zip(images, anns):
        write_image(out / ann.image_path, img.astype(np.float32) / 255)
    n_test = int(round(count * test_fraction))
    train, test = anns[:count - n_test], anns[count - n_test:]
    save_annotations(out / "train.jsonl", train)
    save_annotations(out / "test.jsonl", test)
    return {"train": len(train), "test": len(test), "classes": list(kwargs.get("classes", SHAPE_CLASSES))}


def load_images(annotations: Sequence[Annotation], root: str | Path) -> np.ndarray:
    """Stack the images referenced by ``annotations`` (paths relative to ``root``)."""
    root = Path(root)
    return np.stack([read_image(root / a.image_path) for a in annotations])
