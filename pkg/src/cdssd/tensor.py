"""Dense tensor operations with hand-written backward passes.

The public operations take numpy arrays laid out as ``(N, C, H, W)``; a single
``(C, H, W)`` image is accepted wherever a batch is and the result keeps the
caller's rank.  Backward functions take the upstream gradient plus the same
inputs as the forward call and return gradients w.r.t. each array input.

The weight checkpoint format lives here as well, since it is nothing more than
a named collection of tensors.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"CDSSD1"


class GradCheckError(RuntimeError):
    pass


@dataclass
class Tensor:
    """A parameter array with an optional gradient of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


# --------------------------------------------------------------------------
# convolution
#
# The kernels work in channel-major layout (C, N, H, W): im2col then copies whole
# shifted planes and every convolution is a single ``W @ cols`` product whose
# result is already channel-major.  The public NCHW functions wrap them.
# --------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _to_cm(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (N,C,H,W) array, got shape {x.shape}")
    return x.transpose(1, 0, 2, 3), False


def _from_cm(x: np.ndarray, single: bool) -> np.ndarray:
    return x[:, 0] if single else np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _check_conv_args(c_in, h, w_, kernel, stride, pad):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    k = kernel.shape[-1]
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid conv parameters k={k} stride={stride} pad={pad}")
    if c_in != kernel.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {c_in} channels, kernel expects {kernel.shape[1]}"
        )
    if h + 2 * pad < k or w_ + 2 * pad < k:
        raise ValueError(f"input {(h, w_)} with pad {pad} smaller than kernel {k}")


def im2col_cm(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix ``(C*k*k, N*H'*W')`` of a channel-major input."""
    c, n, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if k == 1 and stride == 1 and pad == 0:
        return x.reshape(c, -1)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, -1)


def col2im_cm(dcols: np.ndarray, x_shape, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col_cm`: scatter-add patches back to ``x_shape``."""
    c, n, h, w = x_shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if k == 1 and stride == 1 and pad == 0:
        return dcols.reshape(x_shape)
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d_cm(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1,
              pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Channel-major convolution; returns ``(out, cols)`` so backward can reuse the patches."""
    c, n, h, wd = x.shape
    _check_conv_args(c, h, wd, w, stride, pad)
    k = w.shape[-1]
    cols = im2col_cm(x, k, stride, pad)
    out = w.reshape(w.shape[0], -1) @ cols
    if b is not None:
        out += b[:, None]
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    return out.reshape(w.shape[0], n, ho, wo), cols


def conv2d_cm_backward(dout: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray,
                       stride: int = 1, pad: int = 0, need_dx: bool = True):
    co = w.shape[0]
    d = dout.reshape(co, -1)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    dx = None
    if need_dx:
        dx = col2im_cm(w.reshape(co, -1).T @ d, x_shape, w.shape[-1], stride, pad)
    return dx, dw, db


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with kernels (C_out, C_in, k, k)."""
    xc, single = _to_cm(np.asarray(x))
    out, _ = conv2d_cm(xc, w, b, stride, pad)
    return _from_cm(out, single)


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1,
                    pad: int = 0):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d`."""
    xc, single = _to_cm(np.asarray(x))
    dc, _ = _to_cm(np.asarray(dout))
    cols = im2col_cm(xc, w.shape[-1], stride, pad)
    dx, dw, db = conv2d_cm_backward(dc, xc.shape, w, cols, stride, pad)
    return _from_cm(dx, single), dw, db


def transposed_conv2d_cm(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                         stride: int = 1) -> np.ndarray:
    """Channel-major fractionally strided convolution, kernel (C_in, C_out, k, k)."""
    ci, n, h, wd = x.shape
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be (C_in, C_out, k, k), got {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if ci != w.shape[0]:
        raise ValueError(
            f"transposed_conv2d channel mismatch: input has {ci} channels, kernel expects {w.shape[0]}"
        )
    co, k = w.shape[1], w.shape[2]
    cols = w.reshape(ci, -1).T @ x.reshape(ci, -1)          # (co*k*k, n*h*w)
    if k == stride:
        out = cols.reshape(co, k, k, n, h, wd).transpose(0, 3, 4, 1, 5, 2).reshape(co, n, h * k, wd * k)
    else:
        out = col2im_cm(cols, (co, n, (h - 1) * stride + k, (wd - 1) * stride + k), k, stride, 0)
    if b is not None:
        out = out + b[:, None, None, None]
    return np.ascontiguousarray(out)


def transposed_conv2d_cm_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1):
    ci, co, k = w.shape[0], w.shape[1], w.shape[2]
    _, n, h, wd = x.shape
    if k == stride:
        cols = dout.reshape(co, n, h, k, wd, k).transpose(0, 3, 5, 1, 2, 4).reshape(co * k * k, -1)
    else:
        cols = im2col_cm(dout, k, stride, 0)
    dx = (w.reshape(ci, -1) @ cols).reshape(ci, n, h, wd)
    dw = (x.reshape(ci, -1) @ cols.T).reshape(w.shape)
    db = dout.sum(axis=(1, 2, 3))
    return dx, dw, db


def transposed_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                      stride: int = 1) -> np.ndarray:
    """Fractionally strided convolution; kernel layout (C_in, C_out, k, k).

    Output side is ``(H - 1) * stride + k``.  This is exactly the adjoint of
    :func:`conv2d` (pad 0) with the same kernel array.
    """
    xc, single = _to_cm(np.asarray(x))
    return _from_cm(transposed_conv2d_cm(xc, w, b, stride), single)


def transposed_conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1):
    """Gradients ``(dx, dw, db)`` of :func:`transposed_conv2d`."""
    xc, single = _to_cm(np.asarray(x))
    dc, _ = _to_cm(np.asarray(dout))
    dx, dw, db = transposed_conv2d_cm_backward(dc, xc, w, stride)
    return _from_cm(dx, single), dw, db


# --------------------------------------------------------------------------
# pooling / resampling (layout-agnostic: act on the two trailing axes)
# --------------------------------------------------------------------------

def _pad_to_multiple(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape[-2:]
    hp, wp = -(-h // k) * k, -(-w // k) * k
    if (hp, wp) == (h, w):
        return x
    # partial edge windows: padding never wins the max
    pad = [(0, 0)] * (x.ndim - 2) + [(0, hp - h), (0, wp - w)]
    return np.pad(x, pad, constant_values=-np.inf)


def maxpool(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Stride-k, window-k max pooling with partial windows at odd edges."""
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ValueError(f"cannot pool array of shape {x.shape}")
    if k == 1:
        return x
    xp = _pad_to_multiple(x, k)
    out = xp[..., 0::k, 0::k]
    for i in range(k):
        for j in range(k):
            if i or j:
                out = np.maximum(out, xp[..., i::k, j::k])
    return out


def maxpool_backward(dout: np.ndarray, x: np.ndarray, k: int = 2) -> np.ndarray:
    """Route each output gradient to the first arg-max (row-major) of its window."""
    if k == 1:
        return dout
    xp = _pad_to_multiple(x, k)
    out = maxpool(x, k)
    dx = np.zeros(xp.shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(k):
        for j in range(k):
            hit = (xp[..., i::k, j::k] == out) & ~taken
            taken |= hit
            dx[..., i::k, j::k] = np.where(hit, dout, 0)
    h, w = x.shape[-2:]
    return dx[..., :h, :w]


def maxpool2(x: np.ndarray) -> np.ndarray:
    return maxpool(x, 2)


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_nearest(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of the two trailing axes to ``size``."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    if size[0] % h == 0 and size[1] % w == 0:
        return x.repeat(size[0] // h, axis=-2).repeat(size[1] // w, axis=-1)
    return x[..., _nearest_index(h, size[0])[:, None], _nearest_index(w, size[1])[None, :]]


def resize_nearest_backward(dout: np.ndarray, in_size: tuple[int, int]) -> np.ndarray:
    h, w = in_size
    ho, wo = dout.shape[-2:]
    if (h, w) == (ho, wo):
        return dout
    if ho % h == 0 and wo % w == 0:
        fh, fw = ho // h, wo // w
        return dout.reshape(dout.shape[:-2] + (h, fh, w, fw)).sum(axis=(-3, -1))
    # general case: accumulate rows then columns
    rows = np.zeros(dout.shape[:-2] + (h, wo), dtype=dout.dtype)
    np.add.at(rows, (..., _nearest_index(h, ho), slice(None)), dout)
    dx = np.zeros(dout.shape[:-2] + (h, w), dtype=dout.dtype)
    np.add.at(dx, (..., _nearest_index(w, wo)), rows)
    return dx


# --------------------------------------------------------------------------
# elementwise / losses
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row ``-log softmax(logits)[label]`` for logits of shape (..., C)."""
    lp = log_softmax(logits)
    return -np.take_along_axis(lp, labels[..., None].astype(np.intp), axis=-1)[..., 0]


def softmax_cross_entropy_backward(dloss: np.ndarray, logits: np.ndarray,
                                   labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    np.put_along_axis(g, labels[..., None].astype(np.intp),
                      np.take_along_axis(g, labels[..., None].astype(np.intp), axis=-1) - 1,
                      axis=-1)
    return g * dloss[..., None]


def smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1, 0.5 * d * d, a - 0.5)


def smooth_l1_backward(dout: np.ndarray, d: np.ndarray) -> np.ndarray:
    return dout * np.clip(d, -1, 1)


def dropout_mask(shape: Sequence[int], rate: float, seed) -> np.ndarray:
    """Keep-mask scaled by ``1/(1-rate)``; ``seed`` may be an int or a tuple
    such as ``(run_seed, layer, step)`` so masks are reproducible per call site."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(np.float32) / np.float32(1 - rate)


def dropout(x: np.ndarray, rate: float, seed, enabled: bool = True) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not enabled or rate == 0:
        return x
    return x * dropout_mask(x.shape, rate, seed).astype(x.dtype)


def dropout_backward(dout: np.ndarray, rate: float, seed, enabled: bool = True) -> np.ndarray:
    if not enabled or rate == 0:
        return dout
    return dout * dropout_mask(dout.shape, rate, seed).astype(dout.dtype)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def grad_check(forward: Callable[..., np.ndarray], backward: Callable[..., Sequence[np.ndarray]],
               inputs: Sequence[np.ndarray], eps: float = 1e-5, seed: int = 0,
               name: str | None = None) -> float:
    """Compare analytic and central-difference gradients of ``forward``.

    The scalar probed is ``sum(forward(*inputs) * r)`` for a fixed random ``r``,
    so ``backward(r, *inputs)`` must return one gradient per input.  Returns the
    maximum of ``|analytic - numeric| / max(1, |analytic|)`` over all elements.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    name = name or getattr(forward, "__name__", "operation")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = np.asarray(forward(*inputs), dtype=np.float64)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = backward(r, *inputs)
    if len(analytic) != len(inputs):
        raise ValueError(f"{name}: backward returned {len(analytic)} grads for {len(inputs)} inputs")
    worst = 0.0
    for idx, (x, g) in enumerate(zip(inputs, analytic)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"{name}: grad {idx} has shape {g.shape}, input has {x.shape}")
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"{name}: non-finite analytic gradient for input {idx}")
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(np.asarray(forward(*inputs)) * r))
            flat[i] = orig - eps
            fm = float(np.sum(np.asarray(forward(*inputs)) * r))
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if not np.isfinite(num):
                raise GradCheckError(f"{name}: non-finite numeric gradient for input {idx}")
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as: magic, u32 count, then per tensor
    (u32 name length, utf-8 name, u32 rank, u32 dims..., float32 data), all little-endian."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a CDSSD1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (count,) = take("<I")
        out = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise ValueError("truncated tensor data")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(
                np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
