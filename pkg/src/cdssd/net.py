"""Convolution-deconvolution detector.

The encoder is a stack of meta-layers (3x3 conv, relu, dropout, 2x2 max pool);
the decoder mirrors it with stride-2 transposed convolutions and reconstructs
the input image.  In detection mode each head layer fuses the four maps of its
meta-layer (encoder before/after pooling, decoder before/after upsampling),
box-pools the result and predicts ``K * (C + 1 + 4)`` channels per cell.

Parameter names: ``enc{i}.w``, ``dec{i}.w``, ``fuse{i}.w``, ``head{i}.w`` and
the matching ``.b`` biases, with ``i`` the 1-based meta-layer index.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .anchors import FeatureMapSpec
from .tensor import (Tensor, _from_cm, _to_cm, conv2d_cm, conv2d_cm_backward, dropout_mask,
                     maxpool, maxpool_backward, relu, resize_nearest, resize_nearest_backward,
                     transposed_conv2d_cm, transposed_conv2d_cm_backward)

MODES = ("pretrain", "detect")


@dataclass
class NetworkConfig:
    input_size: int = 96
    meta_layers: int = 4
    channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    num_classes: int = 3
    dropout_rate: float = 0.1
    heads_on_layers: list[int] = field(default_factory=lambda: [2, 3, 4])
    box_pool_per_layer: list[int] = field(default_factory=lambda: [2, 2, 1])
    fused_channels: int = 32
    boxes_per_cell: int = 3
    image_channels: int = 3
    # small head weights keep the initial logits near uniform
    head_init_gain: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.input_size < 1 or self.meta_layers < 1:
            raise ValueError("input_size and meta_layers must be positive")
        if len(self.channels) != self.meta_layers:
            raise ValueError(f"{len(self.channels)} channel entries for {self.meta_layers} meta-layers")
        if not self.heads_on_layers:
            raise ValueError("at least one head layer is required")
        if any(not 1 <= i <= self.meta_layers for i in self.heads_on_layers):
            raise ValueError(f"head layers {self.heads_on_layers} outside [1, {self.meta_layers}]")
        if len(set(self.heads_on_layers)) != len(self.heads_on_layers):
            raise ValueError("duplicate head layers")
        if len(self.box_pool_per_layer) != len(self.heads_on_layers):
            raise ValueError("box_pool_per_layer needs one entry per head layer")
        if any(k not in (1, 2, 3) for k in self.box_pool_per_layer):
            raise ValueError("box pooling sizes must be 1, 2 or 3")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.head_init_gain <= 0:
            raise ValueError("head_init_gain must be positive")
        if self.num_classes < 1 or self.boxes_per_cell < 1 or self.fused_channels < 1:
            raise ValueError("num_classes, boxes_per_cell and fused_channels must be positive")

    @classmethod
    def full_profile(cls, num_classes: int = 24) -> "NetworkConfig":
        """300x300 input with seven meta-layers; expressible, not trainable here."""
        return cls(input_size=300, meta_layers=7, channels=[32, 64, 128, 256, 256, 512, 512],
                   num_classes=num_classes, heads_on_layers=[3, 4, 5, 6, 7],
                   box_pool_per_layer=[3, 3, 2, 1, 1], fused_channels=128, boxes_per_cell=6)

    def feature_sizes(self) -> list[int]:
        """Encoder pre-pool side length per meta-layer (index 0 is layer 1)."""
        sizes = [self.input_size]
        for _ in range(self.meta_layers - 1):
            sizes.append(-(-sizes[-1] // 2))
        return sizes

    def pooled_size(self, layer: int) -> int:
        return -(-self.feature_sizes()[layer - 1] // 2)

    def anchor_layout(self, scales) -> list[FeatureMapSpec]:
        if len(scales) != len(self.heads_on_layers):
            raise ValueError("one anchor scale per head layer is required")
        sizes = self.feature_sizes()
        return [FeatureMapSpec(layer_index=i, m=sizes[i - 1], n=sizes[i - 1], K=self.boxes_per_cell,
                               scale=float(s), box_pool_k=k)
                for i, k, s in zip(self.heads_on_layers, self.box_pool_per_layer, scales)]

    def num_anchors(self) -> int:
        sizes = self.feature_sizes()
        return sum((-(-sizes[i - 1] // k)) ** 2 * self.boxes_per_cell
                   for i, k in zip(self.heads_on_layers, self.box_pool_per_layer))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _he_uniform(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    limit = math.sqrt(6.0 / max(fan_in, 1.0))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


# --------------------------------------------------------------------------
# fusion block
# --------------------------------------------------------------------------

def _check_same_meta_layer(enc_pre, enc_post, dec_pre, dec_post):
    hi, lo = enc_pre.shape[-2:], enc_post.shape[-2:]
    if tuple(lo) != (-(-hi[0] // 2), -(-hi[1] // 2)):
        raise ValueError(f"encoder maps {hi} and {lo} do not come from one meta-layer")
    if dec_pre.shape[-2:] != lo or dec_post.shape[-2:] != hi:
        raise ValueError(
            f"decoder maps {tuple(dec_pre.shape[-2:])}/{tuple(dec_post.shape[-2:])} do not match "
            f"the encoder maps {tuple(lo)}/{tuple(hi)} of the same meta-layer")


def _fuse_cm(maps, w, b):
    _check_same_meta_layer(*maps)
    size = maps[0].shape[-2:]
    cat = np.concatenate([resize_nearest(m, size) for m in maps], axis=0)
    pre, _ = conv2d_cm(cat, w, b)
    return relu(pre), (cat, pre)


def _fuse_cm_backward(dout, maps, w, cache):
    cat, pre = cache
    dcat, dw, db = conv2d_cm_backward(dout * (pre > 0), cat.shape, w, cat.reshape(cat.shape[0], -1))
    grads, c0 = [], 0
    for m in maps:
        c = m.shape[0]
        grads.append(resize_nearest_backward(dcat[c0:c0 + c], m.shape[-2:]))
        c0 += c
    return grads, dw, db


def fuse_meta_layer(enc_pre, enc_post, dec_pre, dec_post, w, b):
    """Resize the four maps of one meta-layer to the encoder pre-pool
    resolution, concatenate on channels and project with a 1x1 conv + relu.

    Maps are (C,H,W) or (N,C,H,W); ``w`` is (fused, sum of channels, 1, 1).
    """
    maps = [_to_cm(np.asarray(m)) for m in (enc_pre, enc_post, dec_pre, dec_post)]
    fused, _ = _fuse_cm([m for m, _ in maps], w, b)
    return _from_cm(fused, maps[0][1])


def fuse_meta_layer_backward(dout, enc_pre, enc_post, dec_pre, dec_post, w, b):
    """Gradients w.r.t. the four maps, ``w`` and ``b``."""
    maps = [_to_cm(np.asarray(m)) for m in (enc_pre, enc_post, dec_pre, dec_post)]
    single = maps[0][1]
    maps = [m for m, _ in maps]
    _, cache = _fuse_cm(maps, w, b)
    d, _ = _to_cm(np.asarray(dout))
    grads, dw, db = _fuse_cm_backward(d, maps, w, cache)
    return (*[_from_cm(g, single) for g in grads], dw, db)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class Network:
    def __init__(self, config: NetworkConfig | None = None, mode: str = "pretrain", seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.config = config or NetworkConfig()
        self.seed = seed
        self.mode = "pretrain"
        self.params: dict[str, Tensor] = {}
        self._init_autoencoder(seed)
        if mode == "detect":
            self.to_detect_mode()

    # -- parameters -------------------------------------------------------

    def _init_autoencoder(self, seed):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        chans = [cfg.image_channels] + list(cfg.channels)
        for i in range(1, cfg.meta_layers + 1):
            cin, cout = chans[i - 1], chans[i]
            self.params[f"enc{i}.w"] = Tensor(_he_uniform(rng, (cout, cin, 3, 3), cin * 9))
            self.params[f"enc{i}.b"] = Tensor(np.zeros(cout, np.float32))
        for i in range(cfg.meta_layers, 0, -1):
            cin, cout = chans[i], chans[i - 1]
            self.params[f"dec{i}.w"] = Tensor(_he_uniform(rng, (cin, cout, 2, 2), cin))
            self.params[f"dec{i}.b"] = Tensor(np.zeros(cout, np.float32))

    def to_detect_mode(self, seed: int | None = None) -> None:
        """Switch to detection: dropout off, fresh fusion and head parameters.

        Encoder and decoder weights are left exactly as they are.
        """
        cfg = self.config
        seed = self.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        chans = [cfg.image_channels] + list(cfg.channels)
        out_ch = cfg.boxes_per_cell * (cfg.num_classes + 1 + 4)
        for i in cfg.heads_on_layers:
            # enc pre, enc post, dec pre (all chans[i]) and dec post (chans[i-1])
            cat_ch = 3 * chans[i] + chans[i - 1]
            f = cfg.fused_channels
            self.params[f"fuse{i}.w"] = Tensor(_he_uniform(rng, (f, cat_ch, 1, 1), cat_ch))
            self.params[f"fuse{i}.b"] = Tensor(np.zeros(f, np.float32))
            self.params[f"head{i}.w"] = Tensor(
                (_he_uniform(rng, (out_ch, f, 3, 3), f * 9) * cfg.head_init_gain).astype(np.float32))
            self.params[f"head{i}.b"] = Tensor(np.zeros(out_ch, np.float32))
        self.mode = "detect"

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if name not in self.params:
                if strict:
                    raise ValueError(f"unexpected parameter {name}")
                continue
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=self.params[name].data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _p(self, name):
        return self.params[name].data

    # -- forward ----------------------------------------------------------

    def _check_input(self, images):
        x = np.asarray(images)
        single = x.ndim == 3
        if single:
            x = x[None]
        s, c = self.config.input_size, self.config.image_channels
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ValueError(f"expected images of shape ({c}, {s}, {s}), got {np.asarray(images).shape}")
        return x.astype(self.dtype, copy=False), single

    @property
    def dtype(self):
        return self.params["enc1.w"].data.dtype

    def _dec_range(self):
        cfg = self.config
        if self.mode == "pretrain":
            return range(cfg.meta_layers, 0, -1)
        return range(cfg.meta_layers, min(cfg.heads_on_layers) - 1, -1)

    def _forward(self, x, step, train):
        # all maps are channel-major (C, N, H, W)
        cfg = self.config
        drop = self.mode == "pretrain" and train and cfg.dropout_rate > 0
        # pixels in [0, 1] are shifted to [-1, 1]; the reconstruction target stays in [0, 1]
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3)) * 2 - 1
        cache = {"n": x.shape[0], "enc": {}, "dec": {}, "heads": {}}
        sizes = cfg.feature_sizes()
        for i in range(1, cfg.meta_layers + 1):
            a, cols = conv2d_cm(h, self._p(f"enc{i}.w"), self._p(f"enc{i}.b"), 1, 1)
            r = relu(a)
            mask = None
            if drop:
                mask = dropout_mask(r.shape, cfg.dropout_rate, (self.seed, i, step)).astype(r.dtype)
                r = r * mask
            post = maxpool(r, 2)
            cache["enc"][i] = dict(shape=h.shape, cols=cols, act=a, mask=mask, pre=r, post=post)
            h = post
        for i in self._dec_range():
            up = transposed_conv2d_cm(h, self._p(f"dec{i}.w"), self._p(f"dec{i}.b"), stride=2)
            up = up[:, :, :sizes[i - 1], :sizes[i - 1]]
            out = relu(up) if i > 1 else up
            cache["dec"][i] = dict(inp=h, act=up, out=out)
            h = out
        return cache

    def _dec_pre(self, cache, i):
        if i == self.config.meta_layers:
            return cache["enc"][i]["post"]
        return cache["dec"][i + 1]["out"]

    def _heads(self, cache):
        cfg = self.config
        n = cache["n"]
        width = cfg.num_classes + 5
        logits, offsets = [], []
        for i, k in zip(cfg.heads_on_layers, cfg.box_pool_per_layer):
            enc = cache["enc"][i]
            maps = (enc["pre"], enc["post"], self._dec_pre(cache, i), cache["dec"][i]["out"])
            fused, fcache = _fuse_cm(maps, self._p(f"fuse{i}.w"), self._p(f"fuse{i}.b"))
            pooled = maxpool(fused, k)
            out, hcols = conv2d_cm(pooled, self._p(f"head{i}.w"), self._p(f"head{i}.b"), 1, 1)
            gh, gw = out.shape[-2:]
            # (K*(C+5), N, h, w) -> (N, h*w*K, C+5): rows ordered by row, col, box
            rows = out.reshape(out.shape[0], n, gh * gw).transpose(1, 2, 0).reshape(n, -1, width)
            logits.append(rows[..., :cfg.num_classes + 1])
            offsets.append(rows[..., cfg.num_classes + 1:])
            cache["heads"][i] = dict(maps=maps, fcache=fcache, fused=fused, pooled=pooled,
                                     hcols=hcols, hshape=out.shape, k=k)
        return np.concatenate(logits, axis=1), np.concatenate(offsets, axis=1)

    def forward_autoencoder(self, images, step: int = 0, train: bool = True,
                            return_cache: bool = False):
        """Reconstruct ``images``; output has exactly the input shape."""
        if self.mode != "pretrain":
            raise RuntimeError("forward_autoencoder needs a network in pretrain mode")
        x, single = self._check_input(images)
        cache = self._forward(x, step, train)
        recon = np.ascontiguousarray(cache["dec"][1]["out"].transpose(1, 0, 2, 3))
        recon = recon[0] if single else recon
        return (recon, cache) if return_cache else recon

    def forward_detect(self, images, return_cache: bool = False):
        """Per-anchor class logits ``(..., A, C+1)`` and offsets ``(..., A, 4)``."""
        if self.mode != "detect":
            raise RuntimeError("forward_detect needs a network in detect mode")
        x, single = self._check_input(images)
        cache = self._forward(x, 0, train=False)
        logits, offsets = self._heads(cache)
        if single:
            logits, offsets = logits[0], offsets[0]
        return (logits, offsets, cache) if return_cache else (logits, offsets)

    # -- backward ---------------------------------------------------------

    def backward(self, cache, d_recon=None, d_logits=None, d_offsets=None) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients into ``Tensor.grad`` and return them.

        ``d_recon`` is in image layout (N,C,H,W); ``d_logits``/``d_offsets``
        match the outputs of :meth:`forward_detect`.
        """
        cfg = self.config
        dt = self.dtype
        n = cache["n"]
        grads: dict[str, np.ndarray] = {}
        g_pre = dict.fromkeys(cache["enc"])
        g_post = dict.fromkeys(cache["enc"])
        g_dec = dict.fromkeys(cache["dec"])

        def acc(store, key, val):
            store[key] = val if store[key] is None else store[key] + val

        def acc_dec_pre(i, val):
            if i == cfg.meta_layers:
                acc(g_post, i, val)
            else:
                acc(g_dec, i + 1, val)

        if d_recon is not None:
            d = np.asarray(d_recon, dtype=dt).reshape(n, cfg.image_channels, *cache["dec"][1]["out"].shape[-2:])
            acc(g_dec, 1, d.transpose(1, 0, 2, 3))

        if d_logits is not None or d_offsets is not None:
            nc = cfg.num_classes + 1
            a = cfg.num_anchors()
            dl = np.zeros((n, a, nc), dt) if d_logits is None else np.asarray(d_logits, dt).reshape(n, a, nc)
            do = np.zeros((n, a, 4), dt) if d_offsets is None else np.asarray(d_offsets, dt).reshape(n, a, 4)
            start = 0
            for i in cfg.heads_on_layers:
                hc = cache["heads"][i]
                ch, _, gh, gw = hc["hshape"]
                rows = gh * gw * cfg.boxes_per_cell
                drows = np.concatenate([dl[:, start:start + rows], do[:, start:start + rows]], axis=-1)
                start += rows
                dout = np.ascontiguousarray(drows.reshape(n, gh * gw, ch).transpose(2, 0, 1))
                w = self._p(f"head{i}.w")
                dpooled, grads[f"head{i}.w"], grads[f"head{i}.b"] = conv2d_cm_backward(
                    dout, hc["pooled"].shape, w, hc["hcols"], 1, 1)
                dfused = maxpool_backward(dpooled, hc["fused"], hc["k"])
                dmaps, grads[f"fuse{i}.w"], grads[f"fuse{i}.b"] = _fuse_cm_backward(
                    dfused, hc["maps"], self._p(f"fuse{i}.w"), hc["fcache"])
                acc(g_pre, i, dmaps[0])
                acc(g_post, i, dmaps[1])
                acc_dec_pre(i, dmaps[2])
                acc(g_dec, i, dmaps[3])

        for i in sorted(cache["dec"]):
            if g_dec[i] is None:
                continue
            dc = cache["dec"][i]
            d = g_dec[i]
            if i > 1:
                d = d * (dc["act"] > 0)
            full = dc["inp"].shape[-1] * 2
            if d.shape[-1] != full or d.shape[-2] != full:
                d = np.pad(d, ((0, 0), (0, 0), (0, full - d.shape[-2]), (0, full - d.shape[-1])))
            dx, dw, db = transposed_conv2d_cm_backward(d, dc["inp"], self._p(f"dec{i}.w"), stride=2)
            grads[f"dec{i}.w"], grads[f"dec{i}.b"] = dw, db
            acc_dec_pre(i, dx)

        for i in range(cfg.meta_layers, 0, -1):
            ec = cache["enc"][i]
            d_pre = g_pre[i]
            if g_post[i] is not None:
                dp = maxpool_backward(g_post[i], ec["pre"], 2)
                d_pre = dp if d_pre is None else d_pre + dp
            if d_pre is None:
                continue
            if ec["mask"] is not None:
                d_pre = d_pre * ec["mask"]
            da = d_pre * (ec["act"] > 0)
            dx, dw, db = conv2d_cm_backward(da, ec["shape"], self._p(f"enc{i}.w"), ec["cols"], 1, 1,
                                            need_dx=i > 1)
            grads[f"enc{i}.w"], grads[f"enc{i}.b"] = dw, db
            if i > 1:
                acc(g_post, i - 1, dx)

        for name, g in grads.items():
            self.params[name].grad = g.astype(dt, copy=False)
        return grads

    # -- convenience ------------------------------------------------------

    def reconstruction_step(self, images, step: int = 0):
        """MSE reconstruction loss and parameter gradients for one batch."""
        x, _ = self._check_input(images)
        recon, cache = self.forward_autoencoder(x, step=step, return_cache=True)
        diff = recon - x
        mse = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self.backward(cache, d_recon=(2.0 / diff.size) * diff)
        return mse, grads


def reconstruction_mse(net: Network, images, batch_size: int = 32) -> float:
    """Mean squared reconstruction error with dropout disabled."""
    x = np.asarray(images, dtype=np.float32)
    total, count = 0.0, 0
    for s in range(0, len(x), batch_size):
        batch = x[s:s + batch_size]
        recon = net.forward_autoencoder(batch, train=False)
        total += float(np.sum((recon.astype(np.float64) - batch) ** 2))
        count += batch.size
    return total / count
