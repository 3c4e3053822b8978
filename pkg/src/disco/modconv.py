"""Modulated convolution and the small conv/nonlinearity blocks around it.

The modulation scales kernel weights per input channel, then renormalizes
each output-channel slice to (near) unit L2 norm; scales come from an
expression feature through a per-layer affine head squashed to stay near 1.
Every differentiable operation ships an explicit VJP; there is no autodiff
graph.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError
from .tensorops import _sample_parts, as_tensor, make_grid

CHECKPOINT_MAGIC = b"DCHK"


@dataclass(frozen=True)
class ConvKernel:
    """Convolution weights [outC, inC, kH, kW] with optional bias [outC]."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_tensor(self.weights, "kernel weights")
        if w.ndim != 4:
            raise DomainError(f"kernel must be [O,I,kH,kW], got shape {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise DomainError(f"kernel extents must be odd, got {w.shape[2:]}")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = as_tensor(self.bias, "kernel bias").reshape(-1)
            if len(b) != w.shape[0]:
                raise DomainError(
                    f"bias length {len(b)} does not match {w.shape[0]} output channels")
            object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class ScaleVector:
    """Strictly positive per-input-channel modulation scales."""

    scales: np.ndarray

    def __post_init__(self):
        s = as_tensor(self.scales, "scales").reshape(-1)
        if np.any(s <= 0.0):
            raise DomainError("scales must be strictly positive")
        object.__setattr__(self, "scales", s)


@dataclass(frozen=True)
class ExpressionFeature:
    """Flat expression feature vector steering the modulation scales."""

    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector",
                           as_tensor(self.vector, "expression feature").reshape(-1))


@dataclass(frozen=True)
class ScaleHead:
    """Affine map from an expression feature to one scale per input channel."""

    weight: np.ndarray  # [inC, D]
    bias: np.ndarray    # [inC]


# ---------------------------------------------------------------------------
# Weight modulation (per-output-channel demodulation)
# ---------------------------------------------------------------------------

def _modulated(weights, scales, eps):
    m = weights * scales[None, :, None, None]
    denom = np.sqrt((m * m).sum(axis=(1, 2, 3)) + eps)
    if np.any(denom == 0.0):
        raise NumericError("demodulation norm underflowed to zero")
    return m, denom, m / denom[:, None, None, None]


def modulate_weights(k: ConvKernel, s: ScaleVector, eps: float = 1e-8) -> ConvKernel:
    """Scale weights per input channel, renormalize per output channel.

    With unit scales and eps -> 0 this L2-normalizes each output-channel
    slice; rescaling ``s`` by any positive constant cancels when eps = 0.
    """
    if eps < 0.0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    if len(s.scales) != k.weights.shape[1]:
        raise DomainError(
            f"scale length {len(s.scales)} does not match "
            f"{k.weights.shape[1]} input channels")
    _, _, wprime = _modulated(k.weights, s.scales, eps)
    return ConvKernel(wprime, k.bias)


# ---------------------------------------------------------------------------
# Plain convolution (cross-correlation, zero padding, odd kernels)
#
# Three internal layouts, all same math: a direct gemm for 1x1 kernels,
# shifted contiguous gemms on a padded flat canvas for stride-1 kernels
# (avoids materializing kh*kw patch copies), and classic im2col for the
# small strided downsampling convolutions.
# ---------------------------------------------------------------------------

def _pad_flat(x, ph, pw):
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = x
    return xp


def _conv_same1(xp_flat, shape, wt):
    """Stride-1 same conv via one contiguous gemm per kernel offset.

    ``xp_flat`` is the zero-padded input flattened per channel and ``wt``
    the weights in offset-major [kH,kW,O,C] layout so each slice is a
    BLAS-ready matrix. Offsets into the flat canvas walk the kernel window;
    wrap-around terms land only in the cropped-away padding columns/rows.
    """
    c, h, w = shape
    kh, kw, o, _ = wt.shape
    wp = w + (kw - 1)
    n = xp_flat.shape[1]
    y = np.zeros((o, n))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            y[:, :n - off] += wt[i, j] @ xp_flat[:, off:]
    return y.reshape(o, h + (kh - 1), wp)[:, :h, :w]


def _conv_same1_grads(xp_flat, shape, wt, upstream, need_input):
    c, h, w = shape
    kh, kw, o, _ = wt.shape
    wp = w + (kw - 1)
    hp = h + (kh - 1)
    n = xp_flat.shape[1]
    gy = np.zeros((o, hp, wp))
    gy[:, :h, :w] = upstream
    gy = gy.reshape(o, n)
    grad_wt = np.empty_like(wt)
    gxp = np.zeros_like(xp_flat) if need_input else None
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            grad_wt[i, j] = gy[:, :n - off] @ xp_flat[:, off:].T
            if need_input:
                gxp[:, off:] += wt[i, j].T @ gy[:, :n - off]
    grad_x = None
    if need_input:
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        grad_x = gxp.reshape(c, hp, wp)[:, ph:ph + h, pw:pw + w]
    return grad_x, grad_wt.transpose(2, 3, 0, 1)


def _im2col(x, kh, kw, stride):
    c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = _pad_flat(x, ph, pw)
    cols = np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d_cached(x, weights, bias=None, stride: int = 1):
    """Same-padded cross-correlation plus the cache for :func:`conv2d_vjp`."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != weights.shape[1]:
        raise DomainError(
            f"conv input shape {x.shape} does not match "
            f"{weights.shape[1]} input channels")
    o, ci, kh, kw = weights.shape
    if kh == 1 and kw == 1 and stride == 1:
        c, h, w = x.shape
        y = (weights.reshape(o, ci) @ x.reshape(ci, h * w)).reshape(o, h, w)
        cache = ("flat", x, weights)
    elif stride == 1:
        xp_flat = _pad_flat(x, (kh - 1) // 2, (kw - 1) // 2).reshape(ci, -1)
        wt = np.ascontiguousarray(weights.transpose(2, 3, 0, 1))
        y = _conv_same1(xp_flat, x.shape, wt)
        cache = ("same1", x.shape, xp_flat, wt)
    else:
        cols = _im2col(x, kh, kw, stride)
        ho, wo = cols.shape[3], cols.shape[4]
        y = (weights.reshape(o, -1) @ cols.reshape(ci * kh * kw, -1)).reshape(o, ho, wo)
        cache = ("im2col", x.shape, cols, weights, stride)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)[:, None, None]
    return y, cache


def conv2d(x, weights, bias=None, stride: int = 1):
    """Same-padded cross-correlation of [C,H,W] with [O,C,kH,kW] weights."""
    x = as_tensor(x, "conv input")
    y, _ = conv2d_cached(x, weights, bias, stride)
    return y


def conv2d_vjp(cache, upstream, need_input: bool = True):
    """Gradients of conv2d w.r.t. input, weights, and bias."""
    grad_b = upstream.sum(axis=(1, 2))
    kind = cache[0]
    if kind == "flat":
        _, x, weights = cache
        o, ci = weights.shape[:2]
        c, h, w = x.shape
        up = upstream.reshape(o, h * w)
        grad_w = (up @ x.reshape(ci, -1).T).reshape(weights.shape)
        grad_x = None
        if need_input:
            grad_x = (weights.reshape(o, ci).T @ up).reshape(x.shape)
        return grad_x, grad_w, grad_b
    if kind == "same1":
        _, shape, xp_flat, wt = cache
        grad_x, grad_w = _conv_same1_grads(xp_flat, shape, wt, upstream,
                                           need_input)
        return grad_x, grad_w, grad_b
    _, shape, cols, weights, stride = cache
    c, h, w = shape
    o, ci, kh, kw = weights.shape
    ho, wo = cols.shape[3], cols.shape[4]
    up = upstream.reshape(o, ho * wo)
    grad_w = (up @ cols.reshape(ci * kh * kw, -1).T).reshape(weights.shape)
    grad_x = None
    if need_input:
        gcols = (weights.reshape(o, -1).T @ up).reshape(ci, kh, kw, ho, wo)
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        gxp = np.zeros((c, h + 2 * ph, w + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        grad_x = gxp[:, ph:ph + h, pw:pw + w]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Modulated convolution forward/backward
# ---------------------------------------------------------------------------

def modconv_forward(x, k: ConvKernel, s: ScaleVector, eps: float = 1e-8):
    """Convolve with modulated weights (stride 1, spatial extent preserved)."""
    mk = modulate_weights(k, s, eps)
    return conv2d(x, mk.weights, mk.bias, stride=1)


def modconv_cached(x, k: ConvKernel, s: ScaleVector, eps: float = 1e-8):
    """modconv_forward that also returns the cache for :func:`modconv_cached_vjp`."""
    if eps < 0.0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    if len(s.scales) != k.weights.shape[1]:
        raise DomainError(
            f"scale length {len(s.scales)} does not match "
            f"{k.weights.shape[1]} input channels")
    m, denom, wprime = _modulated(k.weights, s.scales, eps)
    y, conv_cache = conv2d_cached(x, wprime, k.bias, stride=1)
    return y, (conv_cache, k, s, m, denom)


def modconv_cached_vjp(cache, upstream, need_input: bool = True):
    conv_cache, k, s, m, denom = cache
    grad_x, grad_wprime, grad_b = conv2d_vjp(conv_cache, upstream, need_input)
    corr = (grad_wprime * m).sum(axis=(1, 2, 3))
    grad_m = (grad_wprime / denom[:, None, None, None]
              - m * (corr / denom ** 3)[:, None, None, None])
    grad_w = grad_m * s.scales[None, :, None, None]
    grad_s = (grad_m * k.weights).sum(axis=(0, 2, 3))
    if k.bias is None:
        grad_b = None
    return grad_x, grad_w, grad_s, grad_b


def modconv_vjp(x, k: ConvKernel, s: ScaleVector, eps: float, upstream):
    """VJPs of modconv_forward w.r.t. input, raw weights, scales, and bias.

    Backpropagates through both the convolution and the per-output-channel
    demodulation.
    """
    x = as_tensor(x, "modconv input")
    upstream = as_tensor(upstream, "upstream")
    _, cache = modconv_cached(x, k, s, eps)
    return modconv_cached_vjp(cache, upstream)


# ---------------------------------------------------------------------------
# Expression feature -> modulation scales
# ---------------------------------------------------------------------------

def expression_scales(f: ExpressionFeature, head: ScaleHead) -> ScaleVector:
    """Scales s = 1 + 0.5 tanh(W f + b); zero-initialized heads give s = 1."""
    weight = np.asarray(head.weight, dtype=np.float64)
    bias = np.asarray(head.bias, dtype=np.float64)
    if weight.shape[1] != len(f.vector) or weight.shape[0] != len(bias):
        raise DomainError(
            f"scale head shapes {weight.shape}/{bias.shape} do not match "
            f"feature dimension {len(f.vector)}")
    return ScaleVector(1.0 + 0.5 * np.tanh(weight @ f.vector + bias))


def expression_scales_vjp(f: ExpressionFeature, head: ScaleHead, upstream):
    """Gradients of expression_scales w.r.t. feature, head weight, head bias."""
    u = head.weight @ f.vector + head.bias
    gu = upstream * 0.5 * (1.0 - np.tanh(u) ** 2)
    return head.weight.T @ gu, np.outer(gu, f.vector), gu


# ---------------------------------------------------------------------------
# Pointwise nonlinearities and resampling blocks
# ---------------------------------------------------------------------------

def leaky_relu(x, slope: float = 0.2):
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_vjp(x, upstream, slope: float = 0.2):
    return np.where(x >= 0.0, upstream, slope * upstream)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_vjp(y, upstream):
    """Backward through sigmoid given its forward output ``y``."""
    return upstream * y * (1.0 - y)


# Gather indices and weights are fixed per size pair, so cache them instead
# of re-deriving the sampling geometry every call.
_UPSAMPLE_PLANS = {}


def _upsample_plan(in_h, in_w, out_h, out_w, channels):
    key = (in_h, in_w, out_h, out_w)
    plan = _UPSAMPLE_PLANS.get(key)
    if plan is None:
        _, parts = _sample_parts(np.zeros((1, in_h, in_w)),
                                 make_grid(out_h, out_w).coords)
        x0, x1, y0, y1, fx, fy = parts[:6]
        wx0, wx1 = 1.0 - fx, fx
        wy0, wy1 = 1.0 - fy, fy
        idx = np.stack((y0 * in_w + x0, y0 * in_w + x1,
                        y1 * in_w + x0, y1 * in_w + x1)).reshape(4, -1)
        wts = np.stack((wy0 * wx0, wy0 * wx1,
                        wy1 * wx0, wy1 * wx1)).reshape(4, 1, -1)
        plan = {"idx": idx, "wts": wts, "flat": {}}
        _UPSAMPLE_PLANS[key] = plan
    if channels not in plan["flat"]:
        base = (np.arange(channels) * (in_h * in_w))[None, :, None]
        plan["flat"][channels] = (base + plan["idx"][:, None, :]).ravel()
    return plan


def upsample_bilinear(x, out_h: int, out_w: int):
    """Align-corners bilinear resampling of [C,H,W] to [C,out_h,out_w]."""
    x = as_tensor(x, "input")
    if x.ndim != 3:
        raise DomainError(f"input must be [C,H,W], got shape {x.shape}")
    c, in_h, in_w = x.shape
    plan = _upsample_plan(in_h, in_w, out_h, out_w, c)
    idx, wts = plan["idx"], plan["wts"]
    flat = x.reshape(c, -1)
    out = (wts[0] * flat[:, idx[0]] + wts[1] * flat[:, idx[1]] +
           wts[2] * flat[:, idx[2]] + wts[3] * flat[:, idx[3]])
    return out.reshape(c, out_h, out_w)


def upsample_bilinear_vjp(x, out_h: int, out_w: int, upstream):
    c, in_h, in_w = x.shape
    plan = _upsample_plan(in_h, in_w, out_h, out_w, c)
    vals = (plan["wts"] * upstream.reshape(1, c, -1)).ravel()
    return np.bincount(plan["flat"][c], weights=vals,
                       minlength=c * in_h * in_w).reshape(x.shape)


# ---------------------------------------------------------------------------
# Checkpoint container: "DCHK", u32 count, then per tensor
# u8 name length, name bytes, u32 rank, u32 extents, f64 payload
# ---------------------------------------------------------------------------

def checkpoint_to_bytes(tensors: dict) -> bytes:
    chunks = [struct.pack("<4sI", CHECKPOINT_MAGIC, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # keeps 0-d tensors 0-d
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise DomainError(f"tensor name too long: {name!r}")
        chunks.append(struct.pack("<B", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def checkpoint_from_bytes(data: bytes) -> dict:
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise DomainError("not a checkpoint container (bad magic)")
    (count,) = struct.unpack("<I", data[4:8])
    pos = 8
    out = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<B", data, pos)
            pos += 1
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise DomainError(f"truncated or corrupt checkpoint at byte {pos}: {exc}") from exc
        out[name] = arr.astype(np.float64).reshape(shape)
    if pos != len(data):
        raise DomainError(f"trailing bytes in checkpoint after offset {pos}")
    return out


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
