"""Training-time augmentation with box bookkeeping.

Images are float (3, H, W) arrays in [0, 1]; boxes are normalized (N, 4)
``(cx, cy, w, h)`` arrays with a parallel label array.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import as_box_array, from_corners, iou_matrix, to_corners


@dataclass
class AugmentConfig:
    min_ious: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    patch_scale_range: tuple[float, float] = (0.5, 1.0)
    patch_aspect_range: tuple[float, float] = (1.0, 2.0)
    max_patch_attempts: int = 50
    flip_prob: float = 0.5
    blackout_frac: float = 0.2
    blackout_prob: float = 0.5
    photometric_prob: float = 0.5
    crop: bool = True
    flip: bool = True
    blackout: bool = True
    blur: bool = True
    emboss: bool = True
    edge: bool = True
    color: bool = True
    color_jitter: float = 0.2

    def __post_init__(self):
        self.patch_scale_range = tuple(self.patch_scale_range)
        self.patch_aspect_range = tuple(self.patch_aspect_range)
        lo, hi = self.patch_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad patch_scale_range {self.patch_scale_range}")
        lo, hi = self.patch_aspect_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad patch_aspect_range {self.patch_aspect_range}")
        for name in ("flip_prob", "blackout_frac", "blackout_prob", "photometric_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if any(not 0 < m <= 1 for m in self.min_ious):
            raise ValueError("min_ious must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_scale_range"] = list(self.patch_scale_range)
        d["patch_aspect_range"] = list(self.patch_aspect_range)
        return d


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a (C, H, W) array with pixel-centre aligned bilinear sampling."""
    c, h, w = image.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return image

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def crop_boxes(boxes: np.ndarray, patch: np.ndarray):
    """Remap boxes into a patch given as normalized corners (x0, y0, x1, y1).

    Returns ``(remapped, keep)``: boxes whose centre lies outside the patch are
    dropped, the rest are clipped to the patch and rescaled to [0, 1].
    """
    b = as_box_array(boxes)
    px0, py0, px1, py1 = patch
    keep = (b[:, 0] > px0) & (b[:, 0] < px1) & (b[:, 1] > py0) & (b[:, 1] < py1)
    c = to_corners(b[keep])
    c[:, [0, 2]] = (np.clip(c[:, [0, 2]], px0, px1) - px0) / (px1 - px0)
    c[:, [1, 3]] = (np.clip(c[:, [1, 3]], py0, py1) - py0) / (py1 - py0)
    return from_corners(c), keep


def uncrop_boxes(boxes: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Inverse of :func:`crop_boxes` for boxes that were not clipped."""
    px0, py0, px1, py1 = patch
    c = to_corners(boxes)
    c[:, [0, 2]] = c[:, [0, 2]] * (px1 - px0) + px0
    c[:, [1, 3]] = c[:, [1, 3]] * (py1 - py0) + py0
    return from_corners(c)


def sample_patch(image, boxes, labels, rng: np.random.Generator, cfg: AugmentConfig | None = None,
                 return_patch: bool = False):
    """Random crop whose IoU with at least one box meets a randomly chosen minimum.

    The mode is drawn uniformly from {no crop} and ``cfg.min_ious``.  Up to
    ``max_patch_attempts`` pixel-aligned patches are tried; a patch is accepted
    if some box reaches the IoU bound and at least one box centre falls inside
    it.  The cropped image is resized back to the input size.  If every attempt
    fails the inputs are returned unchanged.
    """
    cfg = cfg or AugmentConfig()
    boxes = as_box_array(boxes)
    labels = np.asarray(labels)
    _, h, w = image.shape
    choice = int(rng.integers(len(cfg.min_ious) + 1))
    patch = np.array([0.0, 0.0, 1.0, 1.0])
    if choice == 0 or len(boxes) == 0:
        return (image, boxes, labels, patch) if return_patch else (image, boxes, labels)
    min_iou = cfg.min_ious[choice - 1]
    for _ in range(cfg.max_patch_attempts):
        scale = rng.uniform(*cfg.patch_scale_range)
        aspect = rng.uniform(*cfg.patch_aspect_range)
        if rng.random() < 0.5:
            aspect = 1.0 / aspect
        pw = int(round(w * np.sqrt(scale * aspect)))
        ph = int(round(h * np.sqrt(scale / aspect)))
        if not (1 <= pw <= w and 1 <= ph <= h):
            continue
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        cand = np.array([x0 / w, y0 / h, (x0 + pw) / w, (y0 + ph) / h])
        overlaps = iou_matrix(from_corners(cand), boxes)[0]
        if overlaps.max() < min_iou:
            continue
        remapped, keep = crop_boxes(boxes, cand)
        if not keep.any():
            continue
        crop = resize_bilinear(image[:, y0:y0 + ph, x0:x0 + pw], (h, w))
        out = (crop, remapped, labels[keep])
        return (*out, cand) if return_patch else out
    return (image, boxes, labels, patch) if return_patch else (image, boxes, labels)


def hflip(image, boxes):
    b = as_box_array(boxes).copy()
    b[:, 0] = 1.0 - b[:, 0]
    return image[:, :, ::-1], b


def random_hflip(image, boxes, rng: np.random.Generator, p: float = 0.5):
    if rng.random() < p:
        return hflip(image, boxes)
    return image, as_box_array(boxes)


def blackout(image, rng: np.random.Generator, frac: float = 0.2):
    """Zero an independent ``frac`` of pixel locations (all channels)."""
    mask = rng.random(image.shape[-2:]) < frac
    return np.where(mask[None], 0, image).astype(image.dtype, copy=False)


def _filter3(image, kernel):
    """3x3 correlation per channel with edge replication."""
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = image.shape[1:]
    out = np.zeros_like(image)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * p[:, i:i + h, j:j + w]
    return out


_BLUR = np.outer([1, 2, 1], [1, 2, 1]) / 16.0
_EMBOSS = np.array([[-2, -1, 0], [-1, 1, 1], [0, 1, 2]], dtype=np.float64)


def gaussian_blur(image):
    return _filter3(image, _BLUR)


def emboss(image, strength: float = 0.5):
    return np.clip((1 - strength) * image + strength * _filter3(image, _EMBOSS), 0, 1)


def unsharp_mask(image, amount: float = 1.0):
    """Edge prominence: add back the difference to a blurred copy."""
    return np.clip(image + amount * (image - gaussian_blur(image)), 0, 1)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def color_jitter(image, rng: np.random.Generator, amount: float = 0.2):
    """Hue rotation (up to ``amount`` of a half turn), saturation and contrast
    scaling by factors in ``[1-amount, 1+amount]``."""
    theta = rng.uniform(-amount, amount) * np.pi
    sat = rng.uniform(1 - amount, 1 + amount)
    con = rng.uniform(1 - amount, 1 + amount)
    rot = np.array([[1, 0, 0], [0, np.cos(theta), -np.sin(theta)], [0, np.sin(theta), np.cos(theta)]])
    m = _YIQ2RGB @ np.diag([1, sat, sat]) @ rot @ _RGB2YIQ
    out = np.tensordot(m, image, axes=(1, 0))
    mean = out.mean()
    return np.clip((out - mean) * con + mean, 0, 1).astype(image.dtype, copy=False)


def photometric(image, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Randomly applied blur / emboss / unsharp-mask / colour jitter; geometry is untouched."""
    cfg = cfg or AugmentConfig()
    ops = [(cfg.blur, gaussian_blur), (cfg.emboss, lambda x: emboss(x, rng.uniform(0.2, 0.5))),
           (cfg.edge, lambda x: unsharp_mask(x, rng.uniform(0.5, 1.5))),
           (cfg.color, lambda x: color_jitter(x, rng, cfg.color_jitter))]
    out = image
    for enabled, op in ops:
        if enabled and rng.random() < cfg.photometric_prob:
            out = op(out)
    return out.astype(image.dtype, copy=False)


def augment(image, boxes, labels, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Patch sampling, flip, photometric distortion, then blackout."""
    cfg = cfg or AugmentConfig()
    image = np.asarray(image, dtype=np.float32)
    boxes, labels = as_box_array(boxes), np.asarray(labels)
    if cfg.crop:
        image, boxes, labels = sample_patch(image, boxes, labels, rng, cfg)
    if cfg.flip:
        image, boxes = random_hflip(image, boxes, rng, cfg.flip_prob)
    image = photometric(image, rng, cfg)
    if cfg.blackout and rng.random() < cfg.blackout_prob:
        image = blackout(image, rng, cfg.blackout_frac)
    return np.ascontiguousarray(image, dtype=np.float32), boxes, labels
