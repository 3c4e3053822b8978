"""Float64 image tensors, normalized grids, and differentiable bilinear sampling.

Arrays are plain numpy ndarrays in double precision, channels-first
``[C, H, W]``. Normalized coordinates use the align-corners convention:
x = -1 is the center of column 0 and x = +1 the center of column W-1
(an axis of extent 1 maps to coordinate 0); same for y over rows.
Coordinates outside [-1, 1] clamp to the border.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# Coordinates within this many pixels of an integer pixel center snap to it,
# so grid coordinates reconstructed from [-1, 1] sample losslessly.
_PIXEL_SNAP = 1e-9


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert to a float64 array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Grid2D:
    """Normalized (x, y) coordinate lattice of an H x W pixel grid."""

    height: int
    width: int
    coords: np.ndarray  # [H, W, 2], last axis (x, y)


def _axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def make_grid(height: int, width: int) -> Grid2D:
    """Coordinate lattice with pixel (0,0) at (-1,-1) and (W-1,H-1) at (1,1)."""
    if height < 1 or width < 1:
        raise DomainError(f"grid extents must be >= 1, got {height}x{width}")
    gx, gy = np.meshgrid(_axis_coords(width), _axis_coords(height))
    return Grid2D(height=int(height), width=int(width),
                  coords=np.stack((gx, gy), axis=-1))


def _to_pixel(c, extent):
    """Normalized coordinate -> clamped continuous pixel index.

    Also returns the clamp pass-through mask, which doubles as the
    derivative of the clamp.
    """
    p = (c + 1.0) * 0.5 * (extent - 1)
    near = np.rint(p)
    p = np.where(np.abs(p - near) <= _PIXEL_SNAP, near, p)
    inside = (p >= 0.0) & (p <= extent - 1.0)
    return np.clip(p, 0.0, float(extent - 1)), inside


def _corners(p, extent):
    lo = np.floor(p)
    np.clip(lo, 0.0, float(max(extent - 2, 0)), out=lo)
    frac = p - lo
    lo = lo.astype(np.intp)
    hi = np.minimum(lo + 1, extent - 1)
    return lo, hi, frac


def _sample_parts(inp, coords):
    C, H, W = inp.shape
    px, in_x = _to_pixel(coords[..., 0], W)
    py, in_y = _to_pixel(coords[..., 1], H)
    x0, x1, fx = _corners(px, W)
    y0, y1, fy = _corners(py, H)
    flat = inp.reshape(C, H * W)
    v00 = flat[:, y0 * W + x0]
    v01 = flat[:, y0 * W + x1]
    v10 = flat[:, y1 * W + x0]
    v11 = flat[:, y1 * W + x1]
    wx0, wx1 = 1.0 - fx, fx
    wy0, wy1 = 1.0 - fy, fy
    top = wx0 * v00 + wx1 * v01
    bot = wx0 * v10 + wx1 * v11
    out = wy0 * top + wy1 * bot
    parts = (x0, x1, y0, y1, fx, fy, in_x, in_y, v00, v01, v10, v11, top, bot)
    return out, parts


def _check_sample_args(inp, coords):
    inp = as_tensor(inp, "input")
    coords = as_tensor(coords, "coords")
    if inp.ndim != 3 or inp.size == 0:
        raise DomainError(f"input must be a non-empty [C,H,W] tensor, got shape {inp.shape}")
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise DomainError(f"coords must be [H,W,2], got shape {coords.shape}")
    return inp, coords


def bilinear_sample(inp, coords) -> np.ndarray:
    """Sample ``inp`` [C,H,W] at normalized (x, y) ``coords`` [Ho,Wo,2].

    Border-clamped bilinear interpolation; output spatial shape follows
    ``coords``. Sampling at the identity grid returns the input unchanged.
    """
    inp, coords = _check_sample_args(inp, coords)
    out, _ = _sample_parts(inp, coords)
    return out


def bilinear_sample_vjp(inp, coords, upstream):
    """Vector-Jacobian products of :func:`bilinear_sample`.

    Returns ``(grad_input, grad_coords)`` for an ``upstream`` cotangent of
    the output shape [C,Ho,Wo].
    """
    inp, coords = _check_sample_args(inp, coords)
    upstream = as_tensor(upstream, "upstream")
    C, H, W = inp.shape
    if upstream.shape != (C,) + coords.shape[:2]:
        raise DomainError(
            f"upstream shape {upstream.shape} does not match output "
            f"{(C,) + coords.shape[:2]}")
    _, parts = _sample_parts(inp, coords)
    x0, x1, y0, y1, fx, fy, in_x, in_y, v00, v01, v10, v11, top, bot = parts
    wx0, wx1 = 1.0 - fx, fx
    wy0, wy1 = 1.0 - fy, fy

    idx = np.stack((y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1))
    wts = np.stack((wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1))
    # One combined bincount scatter over (corner, channel, pixel).
    base = (np.arange(C) * (H * W))[None, :, None]
    flat_idx = (base + idx.reshape(4, 1, -1)).ravel()
    vals = (wts.reshape(4, 1, -1) * upstream.reshape(1, C, -1)).ravel()
    grad_input = np.bincount(flat_idx, weights=vals,
                             minlength=C * H * W).reshape(C, H, W)

    dfx = (upstream * (wy0 * (v01 - v00) + wy1 * (v11 - v10))).sum(axis=0)
    dfy = (upstream * (bot - top)).sum(axis=0)
    gx = dfx * (0.5 * (W - 1)) * in_x
    gy = dfy * (0.5 * (H - 1)) * in_y
    grad_coords = np.stack((gx, gy), axis=-1)
    return grad_input, grad_coords
