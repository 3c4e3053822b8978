"""Synthetic scenes with exact ground truth, brute-force oracles, and metrics.

Scenes are sums of isotropic Gaussian blobs, so the driving frame can be
rendered analytically under the true relative transform instead of being
resampled from the source; ground truth is exact and bilinear warping is
the only approximation left to measure. Oracles here deliberately avoid
the code paths of the modules they check.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import DomainError
from .geometry import (Affine2D, Heatmap, KeypointSet, TPSTransform,
                       tps_fit)
from .modconv import ExpressionFeature
from .tensorops import as_tensor, make_grid

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return the 99.0 cap."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.shape != b.shape:
        raise DomainError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0.0:
        raise DomainError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(a, b) -> float:
    """Mean local SSIM with a uniform 7x7 window, K1=0.01, K2=0.03, peak 1."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.shape != b.shape:
        raise DomainError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if np.any(a < 0.0) or np.any(a > 1.0) or np.any(b < 0.0) or np.any(b > 1.0):
        raise DomainError("ssim inputs must lie in [0, 1]")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise DomainError(f"ssim expects [H,W] or [C,H,W], got shape {a.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise DomainError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ch in range(a.shape[0]):
        mu_a = _window_mean(a[ch])
        mu_b = _window_mean(b[ch])
        var_a = _window_mean(a[ch] ** 2) - mu_a ** 2
        var_b = _window_mean(b[ch] ** 2) - mu_b ** 2
        cov = _window_mean(a[ch] * b[ch]) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
             ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        vals.append(s.mean())
    return float(np.mean(vals))


def _window_mean(img):
    win = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
    return win.mean(axis=(2, 3))


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def moment_oracle(h: Heatmap):
    """First and second moments by direct per-pixel scalar accumulation.

    Deliberately plain Python loops over plain floats, sharing no code with
    the geometry module's vectorized paths.
    """
    coords = h.grid.coords.tolist()
    values = h.values.tolist()
    mx = my = 0.0
    for vrow, crow in zip(values, coords):
        for v, (x, y) in zip(vrow, crow):
            mx += v * x
            my += v * y
    cxx = cxy = cyy = 0.0
    for vrow, crow in zip(values, coords):
        for v, (x, y) in zip(vrow, crow):
            dx = x - mx
            dy = y - my
            cxx += v * dx * dx
            cxy += v * dx * dy
            cyy += v * dy * dy
    return np.array([mx, my]), np.array([[cxx, cxy], [cxy, cyy]])


def tps_oracle(driving_points, source_points, reg: float = 0.0):
    """TPS coefficients by naive per-entry assembly and a least-squares solve.

    Returns (affine [2,3], weights [N,2]) in the same convention as
    geometry.tps_fit but through an independent code path.
    """
    p = np.asarray(driving_points, dtype=np.float64)
    q = np.asarray(source_points, dtype=np.float64)
    n = len(p)
    lhs = np.zeros((n + 3, n + 3))
    for i in range(n):
        for j in range(n):
            r2 = (p[i, 0] - p[j, 0]) ** 2 + (p[i, 1] - p[j, 1]) ** 2
            lhs[i, j] = r2 * np.log(r2) if r2 > 0.0 else 0.0
        lhs[i, i] += reg
        lhs[i, n] = lhs[n, i] = p[i, 0]
        lhs[i, n + 1] = lhs[n + 1, i] = p[i, 1]
        lhs[i, n + 2] = lhs[n + 2, i] = 1.0
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = q
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol[n:].T, sol[:n]


def central_difference(fn, x, step: float = 1e-4):
    """Central finite-difference gradient of a scalar function of an array.

    Mutates (and restores) ``x`` in place so ``fn`` must read the same array
    object it is handed.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Worst elementwise relative difference with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# Heatmap discretization
# ---------------------------------------------------------------------------

def gaussian_heatmap(height: int, width: int, mean, cov) -> Heatmap:
    """Discretized, renormalized Gaussian density on the normalized grid."""
    mean = np.asarray(mean, dtype=np.float64).reshape(2)
    cov = np.asarray(cov, dtype=np.float64).reshape(2, 2)
    grid = make_grid(height, width)
    d = grid.coords - mean
    prec = np.linalg.inv(cov)
    q = np.einsum("hwi,ij,hwj->hw", d, prec, d)
    v = np.exp(-0.5 * q)
    total = v.sum()
    if total <= 0.0:
        raise DomainError("gaussian heatmap has no mass on the grid")
    return Heatmap(grid, v / total)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Ranges controlling scene content and the sampled true motion."""

    image_size: int = 64
    blob_count: tuple = (2, 3)          # extra blobs besides the controlled one
    blob_sigma: tuple = (0.14, 0.28)
    blob_amp: tuple = (0.3, 0.55)
    eye_sigma: tuple = (0.16, 0.24)
    eye_amp: float = 0.8
    eye_clearance: float = 0.55         # min distance of clutter from the eye blob
    background: tuple = (0.06, 0.14)
    transform: str = "affine"           # "affine" | "tps"
    rotation_max_deg: float = 25.0
    scale_range: tuple = (0.85, 1.2)
    translation_max: float = 0.2
    tps_points: int = 6
    tps_jitter: float = 0.06
    expression_dim: int = 16
    expression_range: tuple = (-1.0, 1.0)
    heatmap_sigma: tuple = (0.06, 0.12)
    embed_seed: int = 1234

    def __post_init__(self):
        if self.transform not in ("affine", "tps"):
            raise DomainError(f"unknown transform kind {self.transform!r}")
        if self.image_size < 8:
            raise DomainError(f"image size too small: {self.image_size}")
        if self.blob_count[0] < 0 or self.blob_count[1] < self.blob_count[0]:
            raise DomainError(f"bad blob count range {self.blob_count}")


@dataclass(frozen=True)
class SyntheticScene:
    """A source/driving pair with exact motion and expression ground truth."""

    source: np.ndarray   # [3, H, W]
    driving: np.ndarray  # [3, H, W]
    transform: object    # Affine2D | TPSTransform, driving -> source
    heatmap_source: Heatmap
    heatmap_driving: Heatmap
    keypoints_source: KeypointSet
    keypoints_driving: KeypointSet
    f_exp: ExpressionFeature
    expression: float
    eye_center_driving: np.ndarray  # (x, y) in the driving frame
    eye_center_source: np.ndarray   # (x, y) in the source frame
    eye_sigma: float
    seed: int


def expression_feature(code: float, dim: int = 16, embed_seed: int = 1234) -> ExpressionFeature:
    """Embed a scalar expression code along a fixed unit direction."""
    rng = np.random.default_rng(embed_seed)
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    return ExpressionFeature(code * u)


def _sample_similarity(rng, spec) -> Affine2D:
    theta = np.deg2rad(rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg))
    s = rng.uniform(*spec.scale_range)
    c, sn = np.cos(theta), np.sin(theta)
    lin = s * np.array([[c, -sn], [sn, c]])
    t = rng.uniform(-spec.translation_max, spec.translation_max, size=2)
    return Affine2D(lin, t)


def _sample_tps(rng, spec) -> TPSTransform:
    n = spec.tps_points
    angles = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    radius = rng.uniform(0.35, 0.6, size=n)
    drv = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    drv += rng.uniform(-0.05, 0.05, size=drv.shape)
    base = _sample_similarity(rng, spec)
    src = base.apply(drv) + rng.uniform(-spec.tps_jitter, spec.tps_jitter,
                                        size=drv.shape)
    return tps_fit(KeypointSet(drv), KeypointSet(src))


def _apply_transform(transform, points):
    if isinstance(transform, Affine2D):
        return transform.apply(points)
    from .geometry import tps_eval_points
    return tps_eval_points(transform, np.asarray(points).reshape(-1, 2)).reshape(
        np.asarray(points).shape)


def _blob_field(coords, centers, sigmas, colors):
    """Sum of isotropic Gaussian blobs evaluated at [...,2] coords."""
    img = np.zeros((3,) + coords.shape[:-1])
    for c, s, col in zip(centers, sigmas, colors):
        d2 = ((coords - c) ** 2).sum(axis=-1)
        img += col.reshape(3, *([1] * (coords.ndim - 1))) * np.exp(-0.5 * d2 / (s * s))
    return img


def render_scene(seed: int, spec: SceneSpec | None = None) -> SyntheticScene:
    """Render a seeded source/driving pair under a known relative transform.

    Blob geometry lives in the source frame; the driving image evaluates the
    same field at transform(p), so it is exact rather than resampled. One
    designated blob's amplitude follows the expression code.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    size = spec.image_size

    if spec.transform == "affine":
        transform = _sample_similarity(rng, spec)
    else:
        transform = _sample_tps(rng, spec)

    n_extra = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    eye_center = rng.uniform(-0.3, 0.3, size=2)
    # keep clutter away from the controlled blob so its region stays clean;
    # fall back to the farthest draw if the clearance is unsatisfiable
    extra_centers = []
    while len(extra_centers) < n_extra:
        best = None
        for _ in range(200):
            cand = rng.uniform(-0.45, 0.45, size=2)
            d = np.linalg.norm(cand - eye_center)
            if best is None or d > best[0]:
                best = (d, cand)
            if d >= spec.eye_clearance:
                break
        extra_centers.append(best[1])
    centers_drv = np.vstack([eye_center[None, :]] + [c[None, :] for c in extra_centers])
    centers_src = _apply_transform(transform, centers_drv)
    sigmas = np.concatenate([
        [rng.uniform(*spec.eye_sigma)],
        rng.uniform(*spec.blob_sigma, size=n_extra)])
    # the controlled blob keeps a fixed reddish hue and the clutter avoids
    # red dominance, so which blob the expression code steers is unambiguous
    eye_color = np.array([[1.0, 0.3, 0.3]]) * rng.uniform(0.85, 1.0)
    clutter = rng.uniform(0.25, 1.0, size=(n_extra, 3))
    clutter[:, 0] = np.minimum(clutter[:, 0], 0.6 * clutter[:, 1:].max(axis=1))
    colors = np.vstack([eye_color, clutter])
    amps = np.concatenate([[spec.eye_amp],
                           rng.uniform(*spec.blob_amp, size=n_extra)])
    colors = colors * amps[:, None]
    background = rng.uniform(*spec.background)

    e_src = 0.0
    e_drv = float(rng.uniform(*spec.expression_range))

    def eye_gain(e):
        return 0.5 + 0.5 * e

    grid = make_grid(size, size)
    src_colors = colors.copy()
    src_colors[0] *= eye_gain(e_src)
    source = np.clip(background + _blob_field(grid.coords, centers_src,
                                              sigmas, src_colors), 0.0, 1.0)

    drv_colors = colors.copy()
    drv_colors[0] *= eye_gain(e_drv)
    warped_coords = _apply_transform(transform, grid.coords.reshape(-1, 2))
    warped_coords = warped_coords.reshape(size, size, 2)
    driving = np.clip(background + _blob_field(warped_coords, centers_src,
                                               sigmas, drv_colors), 0.0, 1.0)

    hm_sigma = rng.uniform(*spec.heatmap_sigma)
    hm_mean_drv = rng.uniform(-0.1, 0.1, size=2)
    hm_cov_drv = (hm_sigma ** 2) * np.eye(2)
    hm_mean_src = _apply_transform(transform, hm_mean_drv.reshape(1, 2))[0]
    if isinstance(transform, Affine2D):
        lin = transform.linear
    else:
        lin = np.asarray(transform.affine)[:, :2]
    hm_cov_src = lin @ hm_cov_drv @ lin.T
    heatmap_driving = gaussian_heatmap(size, size, hm_mean_drv, hm_cov_drv)
    heatmap_source = gaussian_heatmap(size, size, hm_mean_src, hm_cov_src)

    if isinstance(transform, TPSTransform):
        kp_drv = transform.anchors
        kp_src = KeypointSet(_apply_transform(transform, kp_drv.points))
    else:
        pts = rng.uniform(-0.5, 0.5, size=(5, 2))
        kp_drv = KeypointSet(pts)
        kp_src = KeypointSet(transform.apply(pts))

    return SyntheticScene(
        source=source,
        driving=driving,
        transform=transform,
        heatmap_source=heatmap_source,
        heatmap_driving=heatmap_driving,
        keypoints_source=kp_src,
        keypoints_driving=kp_drv,
        f_exp=expression_feature(e_drv, spec.expression_dim, spec.embed_seed),
        expression=e_drv,
        eye_center_driving=centers_drv[0],
        eye_center_source=centers_src[0],
        eye_sigma=float(sigmas[0]),
        seed=int(seed))


def dump_scene(scene: SyntheticScene, directory, prefix: str = "scene") -> dict:
    """Write a scene as PPM frame pair plus transform/expression JSON files.

    Returns the mapping of artifact names to paths, for CLI round trips.
    """
    import json
    import os
    from .geometry import transform_to_json
    from .pnm import write_ppm
    paths = {
        "source": os.path.join(directory, f"{prefix}_source.ppm"),
        "driving": os.path.join(directory, f"{prefix}_driving.ppm"),
        "transform": os.path.join(directory, f"{prefix}_transform.json"),
        "expression": os.path.join(directory, f"{prefix}_expression.json"),
    }
    write_ppm(paths["source"], scene.source)
    write_ppm(paths["driving"], scene.driving)
    with open(paths["transform"], "w") as fh:
        fh.write(transform_to_json(scene.transform))
        fh.write("\n")
    with open(paths["expression"], "w") as fh:
        json.dump(list(scene.f_exp.vector), fh)
        fh.write("\n")
    return paths


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def scene_spec_from_dict(doc: dict) -> SceneSpec:
    known = {f for f in SceneSpec.__dataclass_fields__}
    extra = set(doc) - known
    if extra:
        raise DomainError(f"unknown scene spec fields: {sorted(extra)}")
    doc = dict(doc)
    for key in ("blob_count", "blob_sigma", "blob_amp", "eye_sigma", "background",
                "scale_range", "expression_range", "heatmap_sigma"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SceneSpec(**doc)
