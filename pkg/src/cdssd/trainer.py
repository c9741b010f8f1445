"""SGD with momentum and weight decay; autoencoder pretraining and detector fine-tuning."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anchors import AnchorSet
from .augment import AugmentConfig, augment
from .net import Network
from .targets import detection_loss, match_anchors

LOG_COLUMNS = ("step", "phase", "lr", "loc_loss", "conf_loss", "total",
               "positives", "mined_negatives", "available_negatives")

FULL_PRETRAIN_SCHEDULE = [(1e-3, 25000), (1e-4, 60000)]
FULL_FINETUNE_SCHEDULE = [(2e-3, 30000), (1e-4, 60000)]


@dataclass
class TrainConfig:
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: list = field(default_factory=lambda: [(1e-3, 300), (1e-4, 300)])
    seed: int = 0
    mode: str = "pretrain"
    neg_ratio: float = 2.0
    match_threshold: float = 0.5
    augment: AugmentConfig | None = None

    def __post_init__(self):
        self.schedule = [(float(lr), int(n)) for lr, n in self.schedule]
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.mode not in ("pretrain", "detect"):
            raise ValueError(f"mode must be 'pretrain' or 'detect', got {self.mode!r}")
        # lr == 0 is allowed so a run can be checked to leave the weights alone
        if any(lr < 0 or not np.isfinite(lr) for lr, _ in self.schedule):
            raise ValueError("learning rates must be finite and non-negative")
        if any(n < 0 for _, n in self.schedule):
            raise ValueError("step counts must be >= 0")
        if self.neg_ratio <= 0 or not 0 < self.match_threshold < 1:
            raise ValueError("neg_ratio must be positive and match_threshold in (0, 1)")

    @property
    def total_steps(self) -> int:
        return sum(n for _, n in self.schedule)

    def lr_at(self, step: int) -> tuple[float, int]:
        """Learning rate and schedule segment index for a 0-based step."""
        end = 0
        for k, (lr, n) in enumerate(self.schedule):
            end += n
            if step < end:
                return lr, k
        raise IndexError(f"step {step} beyond schedule of {end} steps")

    @classmethod
    def desk_pretrain(cls, **kw) -> "TrainConfig":
        kw.setdefault("schedule", [(1e-3, 300), (1e-4, 300)])
        return cls(mode="pretrain", **kw)

    @classmethod
    def desk_finetune(cls, **kw) -> "TrainConfig":
        kw.setdefault("schedule", [(2e-2, 3500), (2e-3, 1500)])
        return cls(mode="detect", **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        d["augment"] = self.augment.to_dict() if self.augment else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class TrainingAborted(RuntimeError):
    """Raised on non-finite values; ``record`` holds the diagnostic."""

    def __init__(self, record: dict):
        self.record = record
        super().__init__(f"training aborted at step {record.get('step')}: {record.get('reason')} "
                         f"in {record.get('layer')}")


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: list[dict]
    evals: list[tuple[int, float]] = field(default_factory=list)
    steps_run: int = 0


def _array(holder):
    # ndarray.data is a memoryview, so test the type rather than the attribute
    return holder if isinstance(holder, np.ndarray) else holder.data


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float,
             weight_decay: float, step: int | None = None):
    """``v = momentum*v + g + weight_decay*p``; ``p -= lr*v``.  Updates in place.

    ``params`` maps names to arrays (or objects with ``.data``).  All gradients
    are checked before anything is modified.
    """
    for name in sorted(grads):
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        p = _array(params[name])
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted({"step": step, "layer": name, "reason": "non-finite gradient",
                                   "nan": int(np.isnan(g).sum()), "inf": int(np.isinf(g).sum())})
    for name in sorted(grads):
        holder = params[name]
        p = _array(holder)
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + grads[name] + weight_decay * p
        state[name] = v.astype(p.dtype, copy=False)
        new = (p - lr * state[name]).astype(p.dtype, copy=False)
        if not isinstance(holder, np.ndarray):
            holder.data = new
        else:
            params[name] = new
    return params, state


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled full batches for one epoch; the trailing partial batch is dropped."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch])).permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


def _batches(n: int, cfg: TrainConfig):
    if n < cfg.batch_size:
        raise ValueError(f"dataset of {n} images is smaller than one batch of {cfg.batch_size}")
    step, epoch = 0, 0
    while True:
        for idx in batch_order(n, cfg.batch_size, cfg.seed, epoch):
            if step >= cfg.total_steps:
                return
            yield step, idx
            step += 1
        epoch += 1


def _check_finite(value: float, step: int, what: str):
    if not np.isfinite(value):
        raise TrainingAborted({"step": step, "layer": what, "reason": "non-finite loss"})


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def pretrain(net: Network, images, cfg: TrainConfig | None = None,
             progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize reconstruction MSE of ``images`` (N, 3, S, S) over the schedule."""
    cfg = cfg or TrainConfig.desk_pretrain()
    if net.mode != "pretrain":
        raise ValueError("pretrain needs a network in pretrain mode")
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("pretraining dataset is empty")
    velocity: dict = {}
    log = []
    for step, idx in _batches(len(images), cfg):
        lr, k = cfg.lr_at(step)
        mse, grads = net.reconstruction_step(images[idx], step=step)
        _check_finite(mse, step, "reconstruction")
        sgd_step(net.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, step)
        row = {"step": step, "phase": f"pretrain:{k}", "lr": lr, "total": mse}
        log.append(row)
        if progress:
            progress(row)
    return TrainResult({n: p.copy() for n, p in net.state_dict().items()}, log, steps_run=len(log))


def targets_from_annotations(annotations) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(a.boxes(), a.classes()) for a in annotations]


def finetune(net: Network, images, targets, anchors: AnchorSet, cfg: TrainConfig | None = None,
             eval_hook: Callable[[Network, int], float] | None = None, eval_every: int = 0,
             stop_at: float | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the detector on ``images`` with ``targets[i] = (boxes, labels)``.

    Each step: augment every image, match its boxes to the anchors, run the
    network, take the detection loss per image and average the gradients over
    the batch.  With ``eval_hook`` the metric is recorded every ``eval_every``
    steps (and at the end); ``stop_at`` ends training once it is reached.
    """
    cfg = cfg or TrainConfig.desk_finetune()
    if net.mode != "detect":
        raise ValueError("finetune needs a network in detect mode")
    if len(anchors) != net.config.num_anchors():
        raise ValueError(f"anchor set has {len(anchors)} boxes, network predicts {net.config.num_anchors()}")
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0 or len(images) != len(targets):
        raise ValueError(f"{len(images)} images for {len(targets)} target lists")
    aug_cfg = cfg.augment or AugmentConfig()
    velocity: dict = {}
    log, evals = [], []
    steps = 0
    for step, idx in _batches(len(images), cfg):
        lr, k = cfg.lr_at(step)
        batch, matches = [], []
        for j, i in enumerate(idx):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, step, j]))
            img, boxes, labels = augment(images[i], targets[i][0], targets[i][1], rng, aug_cfg)
            batch.append(img)
            matches.append(match_anchors(anchors, boxes, labels, cfg.match_threshold))
        logits, offsets, cache = net.forward_detect(np.stack(batch), return_cache=True)
        d_logits, d_offsets = np.zeros_like(logits), np.zeros_like(offsets)
        row = {"step": step, "phase": f"finetune:{k}", "lr": lr, "loc_loss": 0.0, "conf_loss": 0.0,
               "total": 0.0, "positives": 0, "mined_negatives": 0, "available_negatives": 0}
        scale = 1.0 / len(idx)
        for j, m in enumerate(matches):
            rep = detection_loss(logits[j], offsets[j], m, cfg.neg_ratio)
            d_logits[j] = rep.grad_logits * scale
            d_offsets[j] = rep.grad_offsets * scale
            row["loc_loss"] += rep.localization * scale
            row["conf_loss"] += rep.confidence * scale
            row["positives"] += rep.num_positives
            row["mined_negatives"] += rep.num_mined_negatives
            row["available_negatives"] += rep.num_available_negatives
        row["total"] = row["loc_loss"] + row["conf_loss"]
        _check_finite(row["total"], step, "detection_loss")
        grads = net.backward(cache, d_logits=d_logits, d_offsets=d_offsets)
        sgd_step(net.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, step)
        log.append(row)
        steps = step + 1
        if progress:
            progress(row)
        last = steps == cfg.total_steps
        if eval_hook and ((eval_every and steps % eval_every == 0) or last):
            metric = float(eval_hook(net, steps))
            evals.append((steps, metric))
            if stop_at is not None and metric >= stop_at:
                break
    return TrainResult({n: p.copy() for n, p in net.state_dict().items()}, log, evals, steps)
