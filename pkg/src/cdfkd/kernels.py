"""Differentiable network and geometry kernels.

Everything here is a pure function of its tensor inputs plus tape
recording: convolution, pooling, bilinear resize (half-pixel centers),
RoI-aligned pooling with continuous box coordinates, and the scalar loss
primitives used by the detector and the distillation objectives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _emit

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8  # below this vector norm, cosine loss degrades to 0/0-grad

__all__ = [
    "FeatureMap",
    "RoiBox",
    "conv2d",
    "pad2d",
    "relu",
    "max_pool2d",
    "bilinear_resize",
    "roi_align",
    "cosine_loss",
    "smooth_l1",
    "bce_with_logits",
    "softmax_ce",
    "softmax_ce_rows",
    "gather_pixels",
]


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box in continuous image-pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x0, self.y0, self.x1, self.y1)):
            raise ValueError(f"non-finite box {self}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty box {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def scaled(self, ratio: float) -> "RoiBox":
        return RoiBox(self.x0 * ratio, self.y0 * ratio, self.x1 * ratio, self.y1 * ratio)

    def clipped(self, width: float, height: float) -> "RoiBox":
        return RoiBox(
            min(max(self.x0, 0.0), width - 1e-3),
            min(max(self.y0, 0.0), height - 1e-3),
            max(min(self.x1, width), 1e-3),
            max(min(self.y1, height), 1e-3),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class FeatureMap:
    """Backbone output: a [C, H', W'] tensor plus its pixel stride."""

    tensor: Tensor
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.tensor.data.ndim != 3:
            raise ShapeError(f"feature map must be [C,H,W], got {self.tensor.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[C,H,W] (already padded) -> [C*kh*kw, H2*W2] patch matrix."""
    c, h, w = x.shape
    h2 = (h - kh) // stride + 1
    w2 = (w - kw) // stride + 1
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, h2, w2), (s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, h2 * w2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [Cin,H,W] with [Cout,Cin,kh,kw] plus bias."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} must be rank 3 and 4")
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {x.shape}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride)
    w2d = weight.data.reshape(cout, cin * kh * kw)
    out = (w2d @ cols + bias.data[:, None]).reshape(cout, h2, w2)

    def backward(g):
        g2 = g.reshape(cout, h2 * w2)
        grads = []
        if x.tracked():
            gcols = (w2d.T @ g2).reshape(cin, kh, kw, h2, w2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * h2 : stride, j : j + stride * w2 : stride] += gcols[:, i, j]
            grads.append(gxp[:, pad : pad + h, pad : pad + w] if pad else gxp)
        if weight.tracked():
            grads.append((g2 @ cols.T).reshape(weight.shape))
        if bias.tracked():
            grads.append(g2.sum(axis=1))
        return grads

    return _emit(out, (x, weight, bias), backward, "conv2d")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad a [C,H,W] tensor spatially; backward crops the pad back off.

    A stride-2 3x3 convolution on an even extent has no symmetric padding
    that yields an integral output, so callers pad one-sidedly here and run
    conv2d with pad=0.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"pad2d: input must be [C,H,W], got {x.shape}")
    if min(top, bottom, left, right) < 0:
        raise ValueError(f"pad2d: negative padding ({top}, {bottom}, {left}, {right})")
    if top == bottom == left == right == 0:
        return x
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))
    c, h, w = x.shape

    def backward(g):
        return [g[:, top : top + h, left : left + w].copy()]

    return _emit(out, (x,), backward, "pad2d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g):
        return [g * mask]

    return _emit(out, (x,), backward, "relu")


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling over k x k windows; backward routes to the first argmax."""
    if stride is None:
        stride = k
    c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"max_pool2d: window {k} exceeds extent of input {x.shape}")
    h2 = (h - k) // stride + 1
    w2 = (w - k) // stride + 1
    s0, s1, s2 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, (c, h2, w2, k, k), (s0, s1 * stride, s2 * stride, s1, s2), writeable=False
    ).reshape(c, h2, w2, k * k)
    # np.argmax keeps the first occurrence: the lowest linear window index.
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        ci = np.arange(c)[:, None, None]
        iy = np.arange(h2)[None, :, None] * stride + arg // k
        ix = np.arange(w2)[None, None, :] * stride + arg % k
        np.add.at(gx, (np.broadcast_to(ci, arg.shape), iy, ix), g)
        return [gx]

    return _emit(out, (x,), backward, "max_pool2d")


def _resize_axis_coords(n_in: int, n_out: int, dtype):
    """Half-pixel-center source coordinates, split into floor index and fraction."""
    src = (np.arange(n_out, dtype=dtype) + dtype(0.5)) * dtype(n_in / n_out) - dtype(0.5)
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize [C,H,W] with half-pixel sample centers clamped to the border.

    Written in lerp form (a + f*(b-a)) so constant inputs and size-preserving
    calls reproduce the input bit-for-bit.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {out_h}x{out_w}")
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize: input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    dtype = x.dtype.type
    y0, y1, fy = _resize_axis_coords(h, out_h, dtype)
    x0, x1, fx = _resize_axis_coords(w, out_w, dtype)

    rows = x.data[:, y0, :] + fy[None, :, None] * (x.data[:, y1, :] - x.data[:, y0, :])
    out = rows[:, :, x0] + fx[None, None, :] * (rows[:, :, x1] - rows[:, :, x0])

    def backward(g):
        grows = np.zeros((c, out_h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), x0), g * (1 - fx)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), x1), g * fx[None, None, :])
        gx = np.zeros((c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), y0, slice(None)), grows * (1 - fy)[None, :, None])
        np.add.at(gx, (slice(None), y1, slice(None)), grows * fy[None, :, None])
        return [gx]

    return _emit(out, (x,), backward, "bilinear_resize")


def _bilinear_corners(coords: np.ndarray, limit: int):
    lo = np.floor(coords).astype(np.intp)
    lo = np.clip(lo, 0, limit - 1)
    hi = np.minimum(lo + 1, limit - 1)
    frac = coords - lo
    return lo, hi, frac


def roi_align(
    fm: FeatureMap,
    boxes: list[RoiBox],
    out: int = 7,
    samples: int = 2,
) -> tuple[Tensor, list[int]]:
    """Pool each box into an out x out grid by averaging bilinear samples.

    Boxes are in image-pixel coordinates; the feature-space box is the pixel
    box divided by the stride, kept continuous. Each output bin averages
    ``samples x samples`` points at half-bin-spaced offsets. Boxes whose
    feature-space width or height degenerates below 1e-6 are skipped, not
    fatal; their indices come back in the second return value.

    Returns (pooled [O', C, out, out], skipped box indices).
    """
    x = fm.tensor
    c, h, w = x.shape
    dtype = x.dtype.type
    p, s = out, samples
    offsets = (np.arange(p, dtype=np.float64)[:, None] + (np.arange(s, dtype=np.float64)[None, :] + 0.5) / s).reshape(-1)

    kept: list[int] = []
    skipped: list[int] = []
    plans = []
    outputs = []
    for idx, box in enumerate(boxes):
        fx0, fy0 = box.x0 / fm.stride, box.y0 / fm.stride
        fw, fh = box.width / fm.stride, box.height / fm.stride
        if fw < 1e-6 or fh < 1e-6:
            skipped.append(idx)
            continue
        kept.append(idx)
        ys = np.clip(fy0 + offsets * (fh / p), 0, h - 1)
        xs = np.clip(fx0 + offsets * (fw / p), 0, w - 1)
        y_lo, y_hi, gy = _bilinear_corners(ys, h)
        x_lo, x_hi, gx_ = _bilinear_corners(xs, w)
        gy = gy.astype(dtype)
        gx_ = gx_.astype(dtype)
        v00 = x.data[:, y_lo[:, None], x_lo[None, :]]
        v01 = x.data[:, y_lo[:, None], x_hi[None, :]]
        v10 = x.data[:, y_hi[:, None], x_lo[None, :]]
        v11 = x.data[:, y_hi[:, None], x_hi[None, :]]
        top = v00 + gx_[None, None, :] * (v01 - v00)
        bot = v10 + gx_[None, None, :] * (v11 - v10)
        vals = top + gy[None, :, None] * (bot - top)
        outputs.append(vals.reshape(c, p, s, p, s).mean(axis=(2, 4)))
        plans.append((y_lo, y_hi, gy, x_lo, x_hi, gx_))

    pooled = np.stack(outputs) if outputs else np.zeros((0, c, p, p), dtype=x.dtype)

    def backward(g):
        gx_full = np.zeros_like(x.data)
        inv = dtype(1.0 / (s * s))
        for o, (y_lo, y_hi, gy, x_lo, x_hi, gfx) in enumerate(plans):
            gval = np.broadcast_to(g[o][:, :, None, :, None] * inv, (c, p, s, p, s)).reshape(
                c, p * s, p * s
            )
            wy0, wy1 = (1 - gy)[:, None], gy[:, None]
            wx0, wx1 = (1 - gfx)[None, :], gfx[None, :]
            np.add.at(gx_full, (slice(None), y_lo[:, None], x_lo[None, :]), gval * (wy0 * wx0))
            np.add.at(gx_full, (slice(None), y_lo[:, None], x_hi[None, :]), gval * (wy0 * wx1))
            np.add.at(gx_full, (slice(None), y_hi[:, None], x_lo[None, :]), gval * (wy1 * wx0))
            np.add.at(gx_full, (slice(None), y_hi[:, None], x_hi[None, :]), gval * (wy1 * wx1))
        return [gx_full]

    return _emit(pooled, (x,), backward, "roi_align"), skipped


def cosine_loss(a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine similarity of two flat vectors, in [0, 2].

    When either norm falls below 1e-8 the pair contributes loss 0 with zero
    gradient (logged). Norms are formed as sqrt(dot(v, v)), which keeps the
    loss exactly 0 for bit-identical inputs and exactly invariant under
    power-of-two rescaling of either argument.
    """
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_loss: need equal-length vectors, got {a.shape} and {b.shape}")
    av = a.data.astype(np.float64, copy=False)
    bv = b.data.astype(np.float64, copy=False)
    s_ab = float(av @ bv)
    s_aa = float(av @ av)
    s_bb = float(bv @ bv)
    na = math.sqrt(s_aa)
    nb = math.sqrt(s_bb)
    if na < NORM_EPS or nb < NORM_EPS:
        logger.debug("cosine_loss: near-zero norm (%.3g, %.3g), contributing 0", na, nb)
        return Tensor(np.zeros((), dtype=a.dtype))
    denom = math.sqrt(s_aa * s_bb)
    cos = s_ab / denom
    out = np.asarray(1.0 - min(max(cos, -1.0), 1.0), dtype=a.dtype)

    def backward(g):
        gf = float(g)
        grads = []
        if a.tracked():
            ga = -(bv / denom - (cos / s_aa) * av) * gf
            grads.append(ga.astype(a.dtype, copy=False))
        if b.tracked():
            gb = -(av / denom - (cos / s_bb) * bv) * gf
            grads.append(gb.astype(b.dtype, copy=False))
        return grads

    return _emit(out, (a, b), backward, "cosine_loss")


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style loss, mean over elements."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    elems = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(d.size, 1)
    out = np.asarray(elems.sum(dtype=np.float64) / n, dtype=pred.dtype)

    def backward(g):
        ge = np.where(quad, d / beta, np.sign(d)) * (g / n)
        ge = ge.astype(pred.data.dtype, copy=False)
        grads = []
        if pred.tracked():
            grads.append(ge)
        if target.tracked():
            grads.append(-ge)
        return grads

    return _emit(out, (pred, target), backward, "smooth_l1")


def bce_with_logits(logit: Tensor, target) -> Tensor:
    """Binary cross-entropy on logits, mean over elements, log-sum-exp stable."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=logit.data.dtype))
    if logit.shape != target.shape:
        raise ShapeError(f"bce_with_logits: shapes {logit.shape} and {target.shape} differ")
    z = logit.data
    t = target.data
    elems = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    out = np.asarray(elems.sum(dtype=np.float64) / n, dtype=logit.dtype)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return [((sig - t) * (g / n)).astype(z.dtype, copy=False)]

    return _emit(out, (logit,), backward, "bce_with_logits")


def softmax_ce(logits: Tensor, cls: int) -> Tensor:
    """Cross-entropy of a single class against 1-D logits."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_ce: logits must be 1-D, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= cls < k:
        raise ValueError(f"softmax_ce: class {cls} out of range for {k} logits")
    z = logits.data
    m = z.max()
    exps = np.exp(z - m)
    lse = m + np.log(exps.sum())
    out = np.asarray(lse - z[cls], dtype=logits.dtype)

    def backward(g):
        soft = exps / exps.sum()
        soft = soft.astype(z.dtype, copy=False).copy()
        soft[cls] -= 1
        return [soft * g]

    return _emit(out, (logits,), backward, "softmax_ce")


def softmax_ce_rows(logits: Tensor, classes: np.ndarray) -> Tensor:
    """Mean cross-entropy over the rows of an [N, K] logit matrix."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_ce_rows: logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    classes = np.asarray(classes)
    if classes.shape != (n,):
        raise ShapeError(f"softmax_ce_rows: classes shape {classes.shape} != ({n},)")
    if classes.min() < 0 or classes.max() >= k:
        raise ValueError(f"softmax_ce_rows: class out of range for {k} logits")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    exps = np.exp(z - m)
    lse = m[:, 0] + np.log(exps.sum(axis=1))
    rows = np.arange(n)
    out = np.asarray((lse - z[rows, classes]).sum(dtype=np.float64) / n, dtype=logits.dtype)

    def backward(g):
        soft = (exps / exps.sum(axis=1, keepdims=True)).astype(z.dtype, copy=False).copy()
        soft[rows, classes] -= 1
        return [soft * (g / n)]

    return _emit(out, (logits,), backward, "softmax_ce_rows")


def gather_pixels(t: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Pick per-cell feature vectors from a [C,H,W] tensor -> [N, C]."""
    if t.data.ndim != 3:
        raise ShapeError(f"gather_pixels: input must be [C,H,W], got {t.shape}")
    c, h, w = t.shape
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    if ys.shape != xs.shape or ys.ndim != 1:
        raise ShapeError(f"gather_pixels: index shapes {ys.shape} and {xs.shape} must be equal 1-D")
    if len(ys) and (ys.min() < 0 or ys.max() >= h or xs.min() < 0 or xs.max() >= w):
        raise ShapeError(f"gather_pixels: indices out of range for grid {h}x{w}")
    out = np.ascontiguousarray(t.data[:, ys, xs].T)

    def backward(g):
        full = np.zeros((c, h, w), dtype=g.dtype)
        np.add.at(full, (slice(None), ys, xs), g.T)
        return [full]

    return _emit(out, (t,), backward, "gather_pixels")
