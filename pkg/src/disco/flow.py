"""Dense backward flows: identity/coarse flows, masked composition, warping.

A flow stores absolute normalized sampling coordinates per output pixel
(not displacements), so the identity flow is literally the grid and flows
from different transforms mix in a common convention.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import Affine2D, TPSTransform, tps_eval_points
from .tensorops import as_tensor, bilinear_sample, make_grid

FLOW_MAGIC = b"DFLW"


@dataclass(frozen=True)
class FlowField:
    """Per-pixel normalized (x, y) source coordinates (backward flow)."""

    height: int
    width: int
    coords: np.ndarray  # [H, W, 2]

    def __post_init__(self):
        c = as_tensor(self.coords, "flow coords")
        if c.shape != (self.height, self.width, 2):
            raise DomainError(
                f"flow coords shape {c.shape} does not match "
                f"{(self.height, self.width, 2)}")
        object.__setattr__(self, "coords", c)


@dataclass(frozen=True)
class MotionMask:
    """Per-pixel weight in [0, 1] selecting coarse flow over identity flow."""

    values: np.ndarray  # [H, W]

    def __post_init__(self):
        v = as_tensor(self.values, "mask values")
        if v.ndim != 2:
            raise DomainError(f"mask must be [H,W], got shape {v.shape}")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise DomainError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel inpainting gate in [0, 1]; single channel broadcasts."""

    values: np.ndarray  # [1, H, W] or [C, H, W]

    def __post_init__(self):
        v = as_tensor(self.values, "confidence values")
        if v.ndim != 3:
            raise DomainError(f"confidence must be [C,H,W], got shape {v.shape}")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise DomainError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def identity_flow(height: int, width: int) -> FlowField:
    """Flow sampling each pixel from itself."""
    grid = make_grid(height, width)
    return FlowField(grid.height, grid.width, grid.coords)


def coarse_flow_affine(t: Affine2D, height: int, width: int) -> FlowField:
    """Flow induced by an affine transform: coords(p) = linear p + translation."""
    grid = make_grid(height, width)
    return FlowField(height, width, t.apply(grid.coords))


def coarse_flow_tps(t: TPSTransform, height: int, width: int) -> FlowField:
    """Flow induced by a TPS transform, evaluated at every grid pixel."""
    grid = make_grid(height, width)
    coords = tps_eval_points(t, grid.coords.reshape(-1, 2))
    return FlowField(height, width, coords.reshape(height, width, 2))


def compose_flow(m: MotionMask, o_i: FlowField, o_t: FlowField) -> FlowField:
    """Per-pixel convex combination (1 - M) o O_I + M o O_T."""
    if o_i.coords.shape != o_t.coords.shape:
        raise DomainError(
            f"flow shapes differ: {o_i.coords.shape} vs {o_t.coords.shape}")
    if m.values.shape != (o_i.height, o_i.width):
        raise DomainError(
            f"mask shape {m.values.shape} does not match flow "
            f"{(o_i.height, o_i.width)}")
    w = m.values[..., None]
    return FlowField(o_i.height, o_i.width,
                     (1.0 - w) * o_i.coords + w * o_t.coords)


def warp_features(f, o: FlowField) -> np.ndarray:
    """Backward-warp a [C,H,W] feature map by a flow of the same extent."""
    f = as_tensor(f, "features")
    if f.ndim != 3 or f.shape[1:] != (o.height, o.width):
        raise DomainError(
            f"feature shape {f.shape} does not match flow "
            f"{(o.height, o.width)}")
    return bilinear_sample(f, o.coords)


def apply_confidence(c: ConfidenceMap, f_a) -> np.ndarray:
    """Hadamard-gate aligned features, broadcasting a single-channel map."""
    f_a = as_tensor(f_a, "aligned features")
    if f_a.ndim != 3:
        raise DomainError(f"features must be [C,H,W], got shape {f_a.shape}")
    cv = c.values
    if cv.shape[1:] != f_a.shape[1:] or cv.shape[0] not in (1, f_a.shape[0]):
        raise DomainError(
            f"confidence shape {cv.shape} is not broadcastable to {f_a.shape}")
    return cv * f_a


# ---------------------------------------------------------------------------
# Binary container: "DFLW", u32 height, u32 width, H*W little-endian f64 pairs
# ---------------------------------------------------------------------------

def flow_to_bytes(o: FlowField) -> bytes:
    header = struct.pack("<4sII", FLOW_MAGIC, o.height, o.width)
    return header + np.ascontiguousarray(o.coords, dtype="<f8").tobytes()


def flow_from_bytes(data: bytes) -> FlowField:
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise DomainError("not a flow container (bad magic)")
    height, width = struct.unpack("<II", data[4:12])
    expect = 12 + height * width * 2 * 8
    if len(data) != expect:
        raise DomainError(
            f"flow payload has {len(data)} bytes, expected {expect}")
    coords = np.frombuffer(data, dtype="<f8", offset=12).astype(np.float64)
    return FlowField(height, width, coords.reshape(height, width, 2))


def write_flow(path, o: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(flow_to_bytes(o))


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        return flow_from_bytes(fh.read())
