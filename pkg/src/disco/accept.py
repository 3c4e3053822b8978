"""Acceptance criteria as reusable checks with a JSON report.

Each criterion function measures against its frozen threshold and returns a
:class:`CriterionResult`; the CLI ``accept`` command and the test suite both
run these. Reports contain only deterministic values (runtime checks are
reported as booleans; measured seconds go to stdout INFO lines only), so a
fixed seed reproduces report bytes exactly.
"""
from __future__ import annotations

import io
import json
import os
import sys
import time
from contextlib import redirect_stdout
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DomainError
from .flow import FlowField, MotionMask, compose_flow, identity_flow, warp_features
from .geometry import (Affine2D, KeypointSet, heatmap_to_affine,
                       relative_affine, tps_fit)
from .modconv import (ConvKernel, ExpressionFeature, ScaleHead, ScaleVector,
                      conv2d, conv2d_cached, conv2d_vjp, expression_scales,
                      expression_scales_vjp, modconv_forward, modconv_vjp)
from .pipeline import PipelineConfig, generate, init_params, loss, loss_and_grads
from .synthbench import (SceneSpec, central_difference, gaussian_heatmap,
                         moment_oracle, psnr, relative_error, render_scene,
                         expression_feature, tps_oracle)
from .tensorops import bilinear_sample, bilinear_sample_vjp, make_grid
from .training import (evaluate_loss, evaluate_psnr, make_dataset,
                       scene_spec_for, train)

GRAD_TOL = 1e-5
GRAD_TOL_END_TO_END = 1e-4
FD_STEP = 1e-4


@dataclass
class CriterionResult:
    cid: str
    name: str
    passed: bool
    measured: dict
    detail: str = ""

    def to_dict(self):
        return {"id": self.cid, "name": self.name, "passed": bool(self.passed),
                "measured": self.measured, "detail": self.detail}


def _info(msg):
    print(f"INFO {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Criterion 1: affine recovery from heatmap pairs
# ---------------------------------------------------------------------------

def criterion_affine_recovery(seed: int = 42) -> CriterionResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_mean = 0.0
    worst_cov = 0.0
    for _ in range(100):
        theta = rng.uniform(-np.pi / 6, np.pi / 6)      # rotation <= 30 deg
        scale = rng.uniform(0.8, 1.25)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        b = Affine2D(scale * rot, rng.uniform(-0.3, 0.3, size=2))
        mean_d = rng.uniform(-0.1, 0.1, size=2)
        sig = rng.uniform(0.05, 0.1)
        cov_d = sig * sig * np.eye(2)
        h_src = gaussian_heatmap(64, 64, b.apply(mean_d),
                                 b.linear @ cov_d @ b.linear.T)
        h_drv = gaussian_heatmap(64, 64, mean_d, cov_d)
        rel = relative_affine(heatmap_to_affine(h_src), heatmap_to_affine(h_drv))
        om_d, oc_d = moment_oracle(h_drv)
        om_s, oc_s = moment_oracle(h_src)
        worst_mean = max(worst_mean, float(np.max(np.abs(rel.apply(om_d) - om_s))))
        worst_cov = max(worst_cov, float(np.max(
            np.abs(rel.linear @ oc_d @ rel.linear.T - oc_s))))
    elapsed = time.perf_counter() - t0
    _info(f"criterion 1 ran 100 heatmap pairs in {elapsed:.2f}s")
    passed = worst_mean < 2e-2 and worst_cov < 2e-2 and elapsed < 10.0
    return CriterionResult(
        "1", "affine-recovery", passed,
        {"worst_mean_error": worst_mean, "worst_axes_error": worst_cov,
         "threshold": 2e-2, "runtime_ok": elapsed < 10.0},
        "composed relative affine transports driving moments onto source")


# ---------------------------------------------------------------------------
# Criterion 2: TPS correctness
# ---------------------------------------------------------------------------

def _distinct_points(rng, n):
    while True:
        pts = rng.uniform(-0.8, 0.8, size=(n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() > 1e-2:
            return pts


def criterion_tps_correctness(seed: int = 42) -> CriterionResult:
    rng = np.random.default_rng(seed)
    worst_resid = 0.0
    worst_side = 0.0
    worst_oracle = 0.0
    worst_affine_w = 0.0
    from .geometry import tps_eval_points
    for i in range(100):
        n = 4 + i % 9  # N in {4..12}
        drv = _distinct_points(rng, n)
        src = _distinct_points(rng, n)
        t = tps_fit(KeypointSet(drv), KeypointSet(src))
        worst_resid = max(worst_resid, float(np.max(
            np.abs(tps_eval_points(t, drv) - src))))
        worst_side = max(worst_side, float(np.max(np.abs(t.weights.sum(axis=0)))),
                         float(np.max(np.abs(t.weights.T @ drv))))
        oa, ow = tps_oracle(drv, src)
        worst_oracle = max(worst_oracle,
                           float(np.max(np.abs(t.affine - oa))),
                           float(np.max(np.abs(t.weights - ow))))
        # pure affine motion must carry zero bending weights
        lin = rng.uniform(-0.2, 0.2, size=(2, 2)) + np.eye(2)
        off = rng.uniform(-0.3, 0.3, size=2)
        ta = tps_fit(KeypointSet(drv), KeypointSet(drv @ lin.T + off))
        worst_affine_w = max(worst_affine_w, float(np.max(np.abs(ta.weights))))
    passed = (worst_resid < 1e-8 and worst_side < 1e-8
              and worst_affine_w < 1e-6 and worst_oracle < 1e-8)
    return CriterionResult(
        "2", "tps-correctness", passed,
        {"worst_residual": worst_resid, "worst_side_condition": worst_side,
         "worst_affine_weight": worst_affine_w,
         "worst_oracle_disagreement": worst_oracle},
        "interpolation, side conditions, affine reduction, oracle agreement")


# ---------------------------------------------------------------------------
# Criterion 3: flow composition and warping
# ---------------------------------------------------------------------------

def criterion_flow_composition(seed: int = 42) -> CriterionResult:
    rng = np.random.default_rng(seed)
    endpoints_exact = True
    convex_ok = True
    for _ in range(10):
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        o_i = identity_flow(h, w)
        o_t = FlowField(h, w, rng.uniform(-1.2, 1.2, size=(h, w, 2)))
        zero = compose_flow(MotionMask(np.zeros((h, w))), o_i, o_t)
        one = compose_flow(MotionMask(np.ones((h, w))), o_i, o_t)
        endpoints_exact &= np.array_equal(zero.coords, o_i.coords)
        endpoints_exact &= np.array_equal(one.coords, o_t.coords)
        mid = compose_flow(MotionMask(rng.uniform(0, 1, size=(h, w))), o_i, o_t)
        lo = np.minimum(o_i.coords, o_t.coords)
        hi = np.maximum(o_i.coords, o_t.coords)
        # 1e-15 slack: one rounding step of the convex combination
        convex_ok &= bool(np.all(mid.coords >= lo - 1e-15)
                          and np.all(mid.coords <= hi + 1e-15))

    worst_psnr = np.inf
    spec = SceneSpec(expression_range=(0.0, 0.0))
    for i in range(10):
        scene = render_scene(seed * 100 + i, spec)
        theta = rng.uniform(-np.pi / 8, np.pi / 8)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        scl = np.diag(rng.uniform(0.75, 1.3, size=2))
        b = Affine2D(rot @ scl, rng.uniform(-0.1, 0.1, size=2))
        sv = np.linalg.svd(b.linear, compute_uv=False)
        assert 0.7 <= sv.min() and sv.max() <= 1.4
        from .flow import coarse_flow_affine
        from .geometry import invert_affine
        fwd = warp_features(scene.source, coarse_flow_affine(b, 64, 64))
        back = warp_features(fwd, coarse_flow_affine(invert_affine(b), 64, 64))
        lo_px, hi_px = 6, 58
        worst_psnr = min(worst_psnr, psnr(back[:, lo_px:hi_px, lo_px:hi_px],
                                          scene.source[:, lo_px:hi_px, lo_px:hi_px]))
    passed = endpoints_exact and convex_ok and worst_psnr > 30.0
    return CriterionResult(
        "3", "flow-composition-warping", passed,
        {"endpoints_exact": endpoints_exact, "convexity_ok": convex_ok,
         "worst_round_trip_psnr": float(worst_psnr), "psnr_threshold": 30.0},
        "endpoint identities, convexity, affine round-trip warping")


# ---------------------------------------------------------------------------
# Criterion 4: modulated convolution and gradient checks
# ---------------------------------------------------------------------------

def gradient_check_report(seed: int = 42, size: int = 4, instances: int = 50,
                          defect: str | None = None):
    """Finite-difference sweep over every VJP; returns (lines, worst, ok).

    ``defect`` perturbs the named operation's analytic gradient and is the
    negative-control hook for the CLI.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    def record(name, analytic, fd, floor=1e-7):
        if defect is not None and name.startswith(defect):
            analytic = np.asarray(analytic) * (1.0 + 1e-3) + 1e-9
        err = relative_error(analytic, fd, floor=floor)
        worst[name] = max(worst.get(name, 0.0), err)

    n_small = max(2, instances // 10)

    for _ in range(instances):
        img = rng.normal(size=(2, size, size))
        coords = rng.uniform(-0.95, 0.95, size=(size, size, 2))
        up = rng.normal(size=(2, size, size))
        gi, gc = bilinear_sample_vjp(img, coords, up)
        record("bilinear.input", gi, central_difference(
            lambda a: float((bilinear_sample(a, coords) * up).sum()), img, FD_STEP))
        record("bilinear.coords", gc, central_difference(
            lambda a: float((bilinear_sample(img, a) * up).sum()), coords, FD_STEP))

        x = rng.normal(size=(3, size, size))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        sv = rng.uniform(0.5, 1.5, size=3)
        up2 = rng.normal(size=(2, size, size))
        gx, gw, gs, gb = modconv_vjp(x, ConvKernel(w, b), ScaleVector(sv),
                                     1e-8, up2)

        def mc(xx=x, ww=w, bb=b, ss=sv):
            return float((modconv_forward(
                xx, ConvKernel(ww, bb), ScaleVector(ss), 1e-8) * up2).sum())

        record("modconv.input", gx,
               central_difference(lambda a: mc(xx=a), x, FD_STEP))
        record("modconv.weights", gw,
               central_difference(lambda a: mc(ww=a), w, FD_STEP))
        record("modconv.scales", gs,
               central_difference(lambda a: mc(ss=a), sv, FD_STEP))
        record("modconv.bias", gb,
               central_difference(lambda a: mc(bb=a), b, FD_STEP))

        target = rng.uniform(size=(2, size, size))
        pred = target + rng.choice([-1.0, 1.0], size=target.shape) * \
            rng.uniform(0.05, 0.3, size=target.shape)
        _, gl = loss(pred, target)
        record("loss.l1", gl, central_difference(
            lambda a: loss(a, target)[0], pred, 1e-5))

    for _ in range(n_small):
        for stride, k in ((1, 1), (1, 3), (2, 3)):
            x = rng.normal(size=(2, 2 * size, 2 * size))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            y, cache = conv2d_cached(x, w, b, stride=stride)
            up3 = rng.normal(size=y.shape)
            gx, gw, gb = conv2d_vjp(cache, up3)
            name = f"conv.k{k}s{stride}"
            record(name + ".input", gx, central_difference(
                lambda a: float((conv2d(a, w, b, stride=stride) * up3).sum()),
                x, FD_STEP))
            record(name + ".weights", gw, central_difference(
                lambda a: float((conv2d(x, a, b, stride=stride) * up3).sum()),
                w, FD_STEP))

        hw = rng.normal(size=(4, 3))
        hb = rng.normal(size=4)
        f = rng.normal(size=3)
        up4 = rng.normal(size=4)
        gf, gw, gb = expression_scales_vjp(ExpressionFeature(f),
                                           ScaleHead(hw, hb), up4)

        def es(ww=hw, bb=hb, ff=f):
            return float((expression_scales(
                ExpressionFeature(ff), ScaleHead(ww, bb)).scales * up4).sum())

        record("scales.feature", gf,
               central_difference(lambda a: es(ff=a), f, FD_STEP))
        record("scales.weight", gw,
               central_difference(lambda a: es(ww=a), hw, FD_STEP))
        record("scales.bias", gb,
               central_difference(lambda a: es(bb=a), hb, FD_STEP))

    e2e_err = _end_to_end_gradient_error(seed, defect)
    worst["end_to_end"] = e2e_err

    ok = all(v < GRAD_TOL for k, v in worst.items() if k != "end_to_end")
    ok = ok and worst["end_to_end"] < GRAD_TOL_END_TO_END
    lines = [f"RESULT grad.{k} {worst[k]!r}" for k in sorted(worst)]
    lines.append(f"RESULT grad_check {'pass' if ok else 'fail'}")
    if not ok:
        bad = sorted(k for k, v in worst.items()
                     if v >= (GRAD_TOL_END_TO_END if k == "end_to_end" else GRAD_TOL))
        lines.append(f"RESULT grad_failures {','.join(bad)}")
    return lines, worst, ok


def _end_to_end_gradient_error(seed, defect=None):
    """Worst relative error of 16 sampled parameter-entry gradients at 32x32.

    FD is only a valid oracle at locally smooth points; entries where two FD
    step sizes disagree (a kink inside the probe window) are redrawn.
    """
    cfg = PipelineConfig(image_size=32, widths=(8, 12, 16), feature_channels=16,
                         mod_blocks=2, expression_dim=4, dataset_size=4,
                         holdout=1, seed=seed)
    scene = render_scene(seed + 1, scene_spec_for(cfg))
    rng = np.random.default_rng(seed + 2)
    params = init_params(cfg, rng)
    for k in params:
        if k.endswith(".sw"):
            params[k] = rng.normal(0, 0.3, params[k].shape)

    def run():
        return loss_and_grads(params, cfg, scene.source, scene.transform,
                              scene.f_exp, scene.driving)

    _, grads, _ = run()
    names = sorted(params)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < 16 and attempts < 64:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        flat = params[name].ravel()
        i = int(rng.integers(flat.size))
        fds = []
        for h in (1e-4, 2e-4):
            orig = flat[i]
            flat[i] = orig + h
            fp = run()[0]
            flat[i] = orig - h
            fm = run()[0]
            flat[i] = orig
            fds.append((fp - fm) / (2 * h))
        if abs(fds[0] - fds[1]) > 1e-6 * max(abs(fds[0]), abs(fds[1]), 1e-9):
            continue
        an = grads[name].ravel()[i]
        if defect is not None and "end_to_end".startswith(defect):
            an = an * (1.0 + 1e-3) + 1e-9
        worst = max(worst, abs(fds[0] - an) / max(abs(fds[0]), abs(an), 1e-9))
        checked += 1
    return worst


def criterion_modconv(seed: int = 42) -> CriterionResult:
    rng = np.random.default_rng(seed)
    worst_reduction = 0.0
    worst_invariance = 0.0
    for _ in range(20):
        x = rng.normal(size=(3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        k = ConvKernel(w, b)
        got = modconv_forward(x, k, ScaleVector(np.ones(3)), eps=0.0)
        wn = w / np.sqrt((w ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
        worst_reduction = max(worst_reduction,
                              float(np.max(np.abs(got - conv2d(x, wn, b)))))
        s = rng.uniform(0.5, 1.5, size=3)
        a1 = modconv_forward(x, k, ScaleVector(s), eps=0.0)
        a2 = modconv_forward(x, k, ScaleVector(rng.uniform(0.1, 10.0) * s), eps=0.0)
        worst_invariance = max(worst_invariance, float(np.max(np.abs(a1 - a2))))

    _, worst, grads_ok = gradient_check_report(seed=seed, instances=50)
    unit_worst = max(v for k, v in worst.items() if k != "end_to_end")

    # the stated budget is on the command itself, so time the real thing
    t0 = time.perf_counter()
    code, _ = _run_cli(["grad-check", "--seed", str(seed)])
    elapsed = time.perf_counter() - t0
    _info(f"criterion 4 grad-check command took {elapsed:.1f}s (exit {code})")
    command_ok = code == 0 and elapsed < 60.0
    passed = (worst_reduction < 1e-12 and worst_invariance < 1e-12
              and grads_ok and command_ok)
    return CriterionResult(
        "4", "modulated-convolution", passed,
        {"worst_reduction_error": worst_reduction,
         "worst_scale_invariance_error": worst_invariance,
         "worst_unit_gradient_error": unit_worst,
         "end_to_end_gradient_error": worst["end_to_end"],
         "grad_check_exit_zero": code == 0,
         "runtime_ok": elapsed < 60.0},
        "reduction to plain conv, scale invariance, all VJPs vs central FD")


# ---------------------------------------------------------------------------
# Criterion 5: toy pipeline training (4 configs) + single-sample overfit
# ---------------------------------------------------------------------------

TRAIN_CONFIGS = (("dense-motion", "affine"), ("dense-motion", "tps"),
                 ("neural-mix", "affine"), ("neural-mix", "tps"))

_TRAINED_CACHE: dict = {}


def train_four_configs(seed: int = 42, steps: int = 2000):
    """Train all four variant/transform configs once per process."""
    key = (seed, steps)
    if key not in _TRAINED_CACHE:
        runs = {}
        for variant, tkind in TRAIN_CONFIGS:
            cfg = PipelineConfig(variant=variant, transform=tkind, steps=steps,
                                 seed=seed)
            tr, ho = make_dataset(cfg)
            t0 = time.perf_counter()
            state = train(tr, cfg)
            elapsed = time.perf_counter() - t0
            _info(f"trained {variant}/{tkind}: {steps} steps in {elapsed:.0f}s")
            runs[(variant, tkind)] = {
                "config": cfg, "state": state, "holdout": ho,
                "elapsed": elapsed}
        _TRAINED_CACHE[key] = runs
    return _TRAINED_CACHE[key]


def criterion_training(seed: int = 42, steps: int = 2000) -> list:
    results = []
    for (variant, tkind), run in train_four_configs(seed, steps).items():
        state = run["state"]
        cfg = run["config"]
        initial = state.loss_history[0]
        final = float(np.mean(state.loss_history[-20:]))
        reduction = 1.0 - final / initial
        held_psnr = evaluate_psnr(state.params, cfg, run["holdout"])
        runtime_ok = run["elapsed"] < 900.0
        passed = held_psnr >= 25.0 and reduction >= 0.8 and runtime_ok
        results.append(CriterionResult(
            f"5-{variant}-{tkind}", f"training-{variant}-{tkind}", passed,
            {"holdout_psnr": held_psnr, "psnr_threshold": 25.0,
             "loss_reduction": reduction, "reduction_threshold": 0.8,
             "initial_loss": initial, "final_loss": final,
             "runtime_ok": runtime_ok},
            "2000 Adam steps at lr 1e-4 on the 200-scene dataset"))

    overfit_cfg = PipelineConfig(variant="dense-motion", transform="affine",
                                 batch_size=1, steps=500, dataset_size=2,
                                 holdout=1, seed=seed)
    tr, _ = make_dataset(overfit_cfg)
    state = train(tr, overfit_cfg)
    final = evaluate_loss(state.params, overfit_cfg, tr)
    results.append(CriterionResult(
        "5-overfit", "training-single-sample-overfit", final < 0.02,
        {"overfit_l1": final, "threshold": 0.02},
        "one sample, 500 steps, L1 below 0.02"))
    return results


# ---------------------------------------------------------------------------
# Criterion 6: expression modulation stays inside the controlled region
# ---------------------------------------------------------------------------

def criterion_expression_effect(seed: int = 42, steps: int = 2000) -> CriterionResult:
    run = train_four_configs(seed, steps)[("dense-motion", "affine")]
    cfg = run["config"]
    params = run["state"].params
    spec = scene_spec_for(cfg)
    inside_sum = 0.0
    inside_n = 0
    outside_sum = 0.0
    outside_n = 0
    grid = make_grid(cfg.image_size, cfg.image_size).coords
    for scene in run["holdout"][:5]:
        lo = generate(scene.source, scene.transform,
                      expression_feature(-0.8, spec.expression_dim,
                                         spec.embed_seed), params, cfg)
        hi = generate(scene.source, scene.transform,
                      expression_feature(0.8, spec.expression_dim,
                                         spec.embed_seed), params, cfg)
        diff = np.abs(hi - lo).mean(axis=0)
        d2 = ((grid - scene.eye_center_driving) ** 2).sum(axis=-1)
        inside = d2 <= (3.0 * scene.eye_sigma) ** 2
        inside_sum += float(diff[inside].sum())
        inside_n += int(inside.sum())
        outside_sum += float(diff[~inside].sum())
        outside_n += int((~inside).sum())
    inside_mean = inside_sum / inside_n
    outside_mean = outside_sum / outside_n
    ratio = outside_mean / inside_mean if inside_mean > 0 else np.inf
    return CriterionResult(
        "6", "expression-modulation-locality", bool(ratio < 0.1),
        {"inside_mean_change": inside_mean, "outside_mean_change": outside_mean,
         "ratio": float(ratio), "threshold": 0.1},
        "expression code changes concentrate on the controlled blob region")


# ---------------------------------------------------------------------------
# Criterion 7: determinism of CLI artifacts
# ---------------------------------------------------------------------------

def _run_cli(args):
    from . import cli
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(args)
    return code, buf.getvalue()


def criterion_determinism(workdir, seed: int = 42) -> CriterionResult:
    os.makedirs(workdir, exist_ok=True)
    cfg = PipelineConfig(image_size=32, widths=(8, 12, 16), feature_channels=16,
                         mod_blocks=2, expression_dim=4, dataset_size=6,
                         holdout=1, batch_size=2, steps=25, seed=seed)
    from .pipeline import config_to_json
    cfg_path = os.path.join(workdir, "cfg.json")
    with open(cfg_path, "w") as fh:
        fh.write(config_to_json(cfg))

    same = {}
    # two consecutive runs with identical flags, snapshotting in between
    ck = os.path.join(workdir, "ck.dchk")
    csv = os.path.join(workdir, "loss.csv")
    runs = []
    for _ in range(2):
        code, _ = _run_cli(["train", "--config", cfg_path, "--out", ck,
                            "--loss-csv", csv])
        with open(ck, "rb") as c, open(csv, "rb") as l:
            runs.append((code, c.read(), l.read()))
    same["checkpoint"] = runs[0][0] == runs[1][0] == 0 and runs[0][1] == runs[1][1]
    same["loss_csv"] = runs[0][2] == runs[1][2]

    code1, out1 = _run_cli(["grad-check", "--seed", str(seed), "--instances", "3"])
    code2, out2 = _run_cli(["grad-check", "--seed", str(seed), "--instances", "3"])
    same["grad_check_report"] = (out1 == out2) and code1 == code2 == 0

    pts = os.path.join(workdir, "pts.json")
    with open(pts, "w") as fh:
        json.dump([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.4], [0.2, -0.6]], fh)
    tps_path = os.path.join(workdir, "t.json")
    outs = []
    for _ in range(2):
        code, out = _run_cli(["fit-tps", "--src", pts, "--dst", pts,
                              "--out", tps_path])
        with open(tps_path, "rb") as fh:
            outs.append((code, out, fh.read()))
    same["fit_tps_report"] = outs[0] == outs[1] and outs[0][0] == 0

    passed = all(same.values())
    return CriterionResult(
        "7", "determinism", passed, {k: bool(v) for k, v in same.items()},
        "fixed seed reproduces checkpoints, loss CSVs, and CLI reports bitwise")


# ---------------------------------------------------------------------------
# Suite runner
# ---------------------------------------------------------------------------

SUITES = ("all", "geometry", "flow", "modconv", "pipeline")


def run_suite(suite: str, out_path=None, seed: int = 42, steps: int = 2000,
              workdir=None):
    """Run a named suite; returns (report dict, all_passed)."""
    if suite not in SUITES:
        raise DomainError(f"unknown suite {suite!r}; choose from {SUITES}")
    results: list[CriterionResult] = []
    with threadpool_limits(limits=1):
        if suite in ("all", "geometry"):
            results.append(criterion_affine_recovery(seed))
            results.append(criterion_tps_correctness(seed))
        if suite in ("all", "flow"):
            results.append(criterion_flow_composition(seed))
        if suite in ("all", "modconv"):
            results.append(criterion_modconv(seed))
    if suite in ("all", "pipeline"):
        results.extend(criterion_training(seed, steps))
        results.append(criterion_expression_effect(seed, steps))
        if workdir is None:
            import tempfile
            with tempfile.TemporaryDirectory(prefix="disco-accept-") as wd:
                results.append(criterion_determinism(wd, seed))
        else:
            results.append(criterion_determinism(workdir, seed))
    report = {"suite": suite, "seed": seed,
              "criteria": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report, report["passed"]
