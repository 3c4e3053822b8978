"""Parametric motion models: affine-from-heatmap and thin-plate splines.

Both transform kinds map driving-frame normalized coordinates to
source-frame coordinates (backward-warp convention). The affine variant is
recovered from the first and second moments of a probability heatmap; the
TPS variant interpolates keypoint correspondences with the r^2 log r^2
radial basis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError
from .tensorops import Grid2D, as_tensor

HEATMAP_SUM_TOL = 1e-9
SIDE_CONDITION_TOL = 1e-8
COINCIDENT_TOL = 1e-9
RCOND_MIN = 1e-12


@dataclass(frozen=True)
class Heatmap:
    """Single-channel probability map over a normalized grid."""

    grid: Grid2D
    values: np.ndarray  # [H, W], nonnegative, sums to 1

    def __post_init__(self):
        v = as_tensor(self.values, "heatmap values")
        if v.shape != (self.grid.height, self.grid.width):
            raise DomainError(
                f"heatmap shape {v.shape} does not match grid "
                f"{(self.grid.height, self.grid.width)}")
        if np.any(v < 0.0):
            raise DomainError("heatmap values must be nonnegative")
        total = float(v.sum())
        if abs(total - 1.0) > HEATMAP_SUM_TOL:
            raise DomainError(f"heatmap must sum to 1, got {total!r}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Affine2D:
    """2x3 affine map p -> linear @ p + translation in normalized coords."""

    linear: np.ndarray       # [2, 2]
    translation: np.ndarray  # [2]

    def __post_init__(self):
        lin = as_tensor(self.linear, "affine linear part").reshape(2, 2)
        t = as_tensor(self.translation, "affine translation").reshape(2)
        if _det2(lin) == 0.0:
            raise DomainError("affine linear part is singular")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2))

    def apply(self, points) -> np.ndarray:
        """Apply to one (2,) point or an array of points [..., 2]."""
        p = as_tensor(points, "points")
        return p @ self.linear.T + self.translation


@dataclass(frozen=True)
class KeypointSet:
    """N >= 3 pairwise-distinct points in normalized coordinates."""

    points: np.ndarray  # [N, 2]

    def __post_init__(self):
        pts = as_tensor(self.points, "keypoints").reshape(-1, 2)
        if len(pts) < 3:
            raise DomainError(f"need at least 3 keypoints, got {len(pts)}")
        d2 = _pairwise_sq_dists(pts)
        np.fill_diagonal(d2, np.inf)
        i, j = np.unravel_index(np.argmin(d2), d2.shape)
        if d2[i, j] < COINCIDENT_TOL ** 2:
            raise DomainError(
                f"keypoints {min(i, j)} and {max(i, j)} coincide "
                f"(distance {np.sqrt(d2[i, j]):.3e})")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TPSTransform:
    """Affine part plus radial-basis weights anchored at driving keypoints."""

    anchors: KeypointSet
    affine: np.ndarray   # [2, 3], columns act on (x, y, 1)
    weights: np.ndarray  # [N, 2]

    def __post_init__(self):
        a = as_tensor(self.affine, "tps affine").reshape(2, 3)
        w = as_tensor(self.weights, "tps weights").reshape(len(self.anchors), 2)
        # Bending-energy side conditions of the minimum-distortion solve.
        s1 = np.abs(w.sum(axis=0)).max()
        s2 = np.abs(w.T @ self.anchors.points).max()
        if s1 > SIDE_CONDITION_TOL or s2 > SIDE_CONDITION_TOL:
            raise DomainError(
                f"tps side conditions violated (sum={s1:.3e}, moment={s2:.3e})")
        object.__setattr__(self, "affine", a)
        object.__setattr__(self, "weights", w)


def _det2(m) -> float:
    return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def _pairwise_sq_dists(pts):
    diff = pts[:, None, :] - pts[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def heatmap_translation(h: Heatmap) -> np.ndarray:
    """Expected pixel location under the heatmap, as a normalized (x, y)."""
    return np.einsum("hw,hwc->c", h.values, h.grid.coords)


def heatmap_to_affine(h: Heatmap, eps_cov: float = 1e-6) -> Affine2D:
    """Affine transform from heatmap moments.

    The translation is the heatmap mean; the linear part is U sqrt(S) from
    the SVD of the second-moment matrix floored by ``eps_cov * I``. Column
    signs of U are canonicalized (largest-magnitude entry positive) so the
    result is deterministic.
    """
    if eps_cov <= 0.0:
        raise DomainError(f"eps_cov must be > 0, got {eps_cov}")
    t = heatmap_translation(h)
    d = h.grid.coords - t
    cov = np.einsum("hw,hwi,hwj->ij", h.values, d, d)
    cov = cov + eps_cov * np.eye(2)
    if not np.all(np.isfinite(cov)):
        raise NumericError("heatmap covariance is not finite")
    try:
        u, s, _ = np.linalg.svd(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance SVD failed: {exc}") from exc
    for j in range(2):
        if u[np.argmax(np.abs(u[:, j])), j] < 0.0:
            u[:, j] = -u[:, j]
    return Affine2D(u * np.sqrt(s)[None, :], t)


def relative_affine(src: Affine2D, drv: Affine2D) -> Affine2D:
    """Compose src with the inverse of drv (motion from driver to source)."""
    det = _det2(drv.linear)
    if det == 0.0 or not np.isfinite(det):
        raise NumericError("driving affine is singular")
    with np.errstate(over="ignore", invalid="ignore"):
        inv = np.array([[drv.linear[1, 1], -drv.linear[0, 1]],
                        [-drv.linear[1, 0], drv.linear[0, 0]]]) / det
        lin = src.linear @ inv
        trans = src.translation - lin @ drv.translation
    if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(trans))):
        raise NumericError("driving affine is numerically singular")
    return Affine2D(lin, trans)


def invert_affine(a: Affine2D) -> Affine2D:
    """Inverse map, q -> linear^-1 (q - translation)."""
    return relative_affine(Affine2D.identity(), a)


def tps_radial(r: float) -> float:
    """Radial basis r^2 log r^2, with the limit value 0 at r = 0."""
    if r < 0.0:
        raise DomainError(f"radius must be >= 0, got {r}")
    if r == 0.0:
        return 0.0
    r2 = r * r
    return float(r2 * np.log(r2))


def _radial_sq(r2):
    """r^2 log r^2 evaluated on an array of squared radii."""
    out = np.zeros_like(r2)
    pos = r2 > 0.0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def tps_fit(driving: KeypointSet, source: KeypointSet, reg: float = 0.0) -> TPSTransform:
    """Fit the TPS taking driving keypoints onto source keypoints.

    Solves the standard (N+3)x(N+3) minimum-bending-energy system; with
    ``reg`` = 0 the fit interpolates exactly, larger values relax it.
    """
    if len(driving) != len(source):
        raise DomainError(
            f"keypoint counts differ: {len(driving)} driving vs {len(source)} source")
    if reg < 0.0:
        raise DomainError(f"regularization must be >= 0, got {reg}")
    p = driving.points
    n = len(p)
    k = _radial_sq(_pairwise_sq_dists(p)) + reg * np.eye(n)
    basis = np.concatenate([p, np.ones((n, 1))], axis=1)  # columns (x, y, 1)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = basis
    lhs[n:, :n] = basis.T
    rcond = _rcond(lhs)
    if rcond < RCOND_MIN:
        raise DomainError(f"tps system is singular (rcond={rcond:.3e})")
    rhs = np.concatenate([source.points, np.zeros((3, 2))], axis=0)
    sol = np.linalg.solve(lhs, rhs)
    return TPSTransform(anchors=driving, affine=sol[n:].T, weights=sol[:n])


def _rcond(m) -> float:
    try:
        c = np.linalg.cond(m)
    except np.linalg.LinAlgError:
        return 0.0
    if not np.isfinite(c) or c == 0.0:
        return 0.0
    return 1.0 / float(c)


def tps_eval(t: TPSTransform, p) -> np.ndarray:
    """Evaluate the TPS at one (x, y) point."""
    p = as_tensor(p, "point").reshape(2)
    return tps_eval_points(t, p[None, :])[0]


def tps_eval_points(t: TPSTransform, pts) -> np.ndarray:
    """Evaluate the TPS at an array of points [M, 2]."""
    pts = as_tensor(pts, "points").reshape(-1, 2)
    diff = pts[:, None, :] - t.anchors.points[None, :, :]
    phi = _radial_sq(np.einsum("mnk,mnk->mn", diff, diff))
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    return hom @ t.affine.T + phi @ t.weights


# ---------------------------------------------------------------------------
# JSON serialization (fixed field order, 17 significant digits)
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _fmt_mat(m) -> str:
    rows = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in m)
    return "[" + rows + "]"


def _fmt_vec(v) -> str:
    return "[" + ",".join(_fmt(x) for x in v) + "]"


def transform_to_json(t) -> str:
    """Serialize an Affine2D or TPSTransform to its JSON document."""
    if isinstance(t, Affine2D):
        return ('{"type":"affine","linear":' + _fmt_mat(t.linear) +
                ',"translation":' + _fmt_vec(t.translation) + "}")
    if isinstance(t, TPSTransform):
        return ('{"type":"tps","anchors":' + _fmt_mat(t.anchors.points) +
                ',"affine":' + _fmt_mat(t.affine) +
                ',"weights":' + _fmt_mat(t.weights) + "}")
    raise DomainError(f"not a serializable transform: {type(t).__name__}")


def transform_from_json(text: str):
    """Parse a transform JSON document into Affine2D or TPSTransform."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"invalid transform JSON: {exc}") from exc
    if not isinstance(doc, dict) or "type" not in doc:
        raise DomainError("transform JSON must be an object with a 'type' field")
    kind = doc["type"]
    try:
        if kind == "affine":
            return Affine2D(np.array(doc["linear"], dtype=np.float64),
                            np.array(doc["translation"], dtype=np.float64))
        if kind == "tps":
            return TPSTransform(
                anchors=KeypointSet(np.array(doc["anchors"], dtype=np.float64)),
                affine=np.array(doc["affine"], dtype=np.float64),
                weights=np.array(doc["weights"], dtype=np.float64))
    except KeyError as exc:
        raise DomainError(f"transform JSON missing field {exc}") from exc
    raise DomainError(f"unknown transform type {kind!r}")
