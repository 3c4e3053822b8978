"""Command-line surface: fitting, warping, generation, training, checks.

Every command prints machine-parseable ``RESULT key value`` lines (stable
for fixed flags, inputs, and seed) plus free-form ``INFO`` lines for
timings. Exit codes: 0 success, 1 threshold/check failure, 2 bad usage or
malformed input.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .flow import (MotionMask, compose_flow, identity_flow, read_flow,
                   warp_features, write_flow)
from .geometry import (KeypointSet, heatmap_to_affine, tps_eval_points,
                       tps_fit, transform_from_json, transform_to_json,
                       Heatmap)
from .modconv import ExpressionFeature, load_checkpoint, save_checkpoint
from .pipeline import (PipelineConfig, coarse_flow_for, config_from_json,
                       generate)
from .pnm import read_pgm, read_ppm, write_ppm
from .tensorops import make_grid

DEFAULT_SEED = 42


def _result(key, value):
    if isinstance(value, float):
        value = repr(value)
    print(f"RESULT {key} {value}")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read {what} from {path}: {exc}") from exc


def _load_points(path):
    doc = _load_json(path, "keypoints")
    try:
        pts = np.asarray(doc, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{path}: keypoints must be numeric: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"{path}: keypoints must be a JSON array of [x, y] pairs")
    return pts


def _load_transform(path):
    try:
        with open(path) as fh:
            return transform_from_json(fh.read())
    except OSError as exc:
        raise DomainError(f"cannot read transform from {path}: {exc}") from exc


def cmd_fit_tps(args) -> int:
    src = _load_points(args.src)
    dst = _load_points(args.dst)
    if len(src) != len(dst):
        raise DomainError(
            f"keypoint counts differ: {len(src)} in {args.src} vs "
            f"{len(dst)} in {args.dst}")
    t = tps_fit(KeypointSet(src), KeypointSet(dst), reg=args.reg)
    with open(args.out, "w") as fh:
        fh.write(transform_to_json(t))
        fh.write("\n")
    resid = float(np.max(np.abs(tps_eval_points(t, src) - dst)))
    _result("residual_max", resid)
    _result("weight_max", float(np.max(np.abs(t.weights))))
    _result("out", args.out)
    return 0


def cmd_extract_affine(args) -> int:
    values = read_pgm(args.heatmap)
    total = values.sum()
    if total <= 0.0:
        raise DomainError(f"{args.heatmap}: heatmap has no mass")
    h = Heatmap(make_grid(*values.shape), values / total)
    a = heatmap_to_affine(h, eps_cov=args.eps_cov)
    with open(args.out, "w") as fh:
        fh.write(transform_to_json(a))
        fh.write("\n")
    _result("translation", " ".join(repr(v) for v in a.translation))
    _result("linear", " ".join(repr(v) for v in a.linear.ravel()))
    _result("out", args.out)
    return 0


def _flow_for_image(args, height, width):
    if args.transform:
        flow = coarse_flow_for(_load_transform(args.transform), height, width)
    else:
        flow = read_flow(args.flow)
        if (flow.height, flow.width) != (height, width):
            raise DomainError(
                f"flow extent {flow.height}x{flow.width} does not match "
                f"image {height}x{width}")
    if args.mask:
        mask = MotionMask(read_pgm(args.mask))
        if mask.values.shape != (height, width):
            raise DomainError(
                f"mask extent {mask.values.shape} does not match image "
                f"{height}x{width}")
        flow = compose_flow(mask, identity_flow(height, width), flow)
    return flow


def cmd_warp(args) -> int:
    img = read_ppm(args.image)
    flow = _flow_for_image(args, img.shape[1], img.shape[2])
    out = np.clip(warp_features(img, flow), 0.0, 1.0)
    write_ppm(args.out, out)
    _result("out", args.out)
    return 0


def cmd_compose(args) -> int:
    mask = MotionMask(read_pgm(args.mask))
    h, w = mask.values.shape
    o_t = coarse_flow_for(_load_transform(args.transform), h, w)
    o_p = compose_flow(mask, identity_flow(h, w), o_t)
    write_flow(args.out, o_p)
    _result("height", h)
    _result("width", w)
    _result("out", args.out)
    return 0


def cmd_generate(args) -> int:
    with open(args.config) as fh:
        cfg = config_from_json(fh.read())
    params = load_checkpoint(args.checkpoint)
    source = read_ppm(args.source)
    transform = _load_transform(args.transform)
    vec = np.asarray(_load_json(args.expression, "expression feature"),
                     dtype=np.float64)
    out = generate(source, transform, ExpressionFeature(vec), params, cfg)
    write_ppm(args.out, out)
    _result("out", args.out)
    return 0


def cmd_train(args) -> int:
    from .training import evaluate_psnr, make_dataset, train
    with open(args.config) as fh:
        cfg = config_from_json(fh.read())
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    train_set, holdout = make_dataset(cfg)
    t0 = time.perf_counter()
    state = train(train_set, cfg)
    print(f"INFO trained {cfg.steps} steps in {time.perf_counter() - t0:.1f}s",
          file=sys.stderr)
    save_checkpoint(args.out, state.params)
    if args.loss_csv:
        with open(args.loss_csv, "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(state.loss_history):
                fh.write(f"{i},{v!r}\n")
        _result("loss_csv", args.loss_csv)
    _result("initial_loss", state.loss_history[0])
    _result("final_loss", float(np.mean(state.loss_history[-20:])))
    if holdout:
        _result("holdout_psnr", evaluate_psnr(state.params, cfg, holdout))
    _result("out", args.out)
    return 0


def cmd_grad_check(args) -> int:
    from .accept import gradient_check_report
    from threadpoolctl import threadpool_limits
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        lines, _, ok = gradient_check_report(
            seed=args.seed if args.seed is not None else DEFAULT_SEED,
            size=args.size, instances=args.instances, defect=args.defect)
    for line in lines:
        print(line)
    print(f"INFO gradient checks took {time.perf_counter() - t0:.1f}s",
          file=sys.stderr)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .synthbench import render_scene
    from .pipeline import init_params, loss_and_grads
    from .training import scene_spec_for
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    rng = np.random.default_rng(seed)

    img = rng.uniform(size=(3, 256, 256))
    from .geometry import Affine2D
    flow = coarse_flow_for(Affine2D(0.9 * np.eye(2), np.array([0.1, 0.0])),
                           256, 256)
    t0 = time.perf_counter()
    warp_features(img, flow)
    print(f"INFO warp_256 {1e3 * (time.perf_counter() - t0):.2f} ms", file=sys.stderr)

    pts = rng.uniform(-0.8, 0.8, size=(10, 2))
    t0 = time.perf_counter()
    t = tps_fit(KeypointSet(pts), KeypointSet(pts + 0.05 * rng.normal(size=pts.shape)))
    coarse_flow_for(t, 64, 64)
    print(f"INFO tps_fit_flow_64 {1e3 * (time.perf_counter() - t0):.2f} ms",
          file=sys.stderr)

    cfg = PipelineConfig()
    scene = render_scene(seed, scene_spec_for(cfg))
    params = init_params(cfg, rng)
    loss_and_grads(params, cfg, scene.source, scene.transform, scene.f_exp,
                   scene.driving)
    t0 = time.perf_counter()
    loss_and_grads(params, cfg, scene.source, scene.transform, scene.f_exp,
                   scene.driving)
    print(f"INFO train_step_64 {1e3 * (time.perf_counter() - t0):.2f} ms",
          file=sys.stderr)
    _result("ops_benchmarked", 3)
    return 0


def cmd_accept(args) -> int:
    from .accept import run_suite
    report, passed = run_suite(args.suite, out_path=args.out,
                               seed=args.seed if args.seed is not None else DEFAULT_SEED,
                               steps=args.steps, workdir=args.workdir)
    for crit in report["criteria"]:
        _result(f"accept.{crit['id']}", "PASS" if crit["passed"] else "FAIL")
    _result("accept", "PASS" if passed else "FAIL")
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="disco",
        description="Geometric motion transfer: transforms, flows, "
                    "modulated generation, and verification suites.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit-tps", help="fit a TPS taking --src points onto --dst points")
    sp.add_argument("--src", required=True, help="JSON [[x,y],...] anchor points")
    sp.add_argument("--dst", required=True, help="JSON [[x,y],...] target points")
    sp.add_argument("--reg", type=float, default=0.0, help="ridge regularization")
    sp.add_argument("--out", required=True, help="output transform JSON")
    sp.set_defaults(fn=cmd_fit_tps)

    sp = sub.add_parser("extract-affine", help="affine transform from a PGM heatmap")
    sp.add_argument("--heatmap", required=True, help="input PGM (renormalized)")
    sp.add_argument("--eps-cov", type=float, default=1e-6, help="covariance floor")
    sp.add_argument("--out", required=True, help="output transform JSON")
    sp.set_defaults(fn=cmd_extract_affine)

    sp = sub.add_parser("warp", help="backward-warp a PPM image by a transform or flow")
    sp.add_argument("--image", required=True, help="input PPM")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--transform", help="transform JSON (affine or tps)")
    group.add_argument("--flow", help="flow container (DFLW)")
    sp.add_argument("--mask", help="optional PGM motion mask blending against identity")
    sp.add_argument("--out", required=True, help="output PPM")
    sp.set_defaults(fn=cmd_warp)

    sp = sub.add_parser("compose", help="blend identity and coarse flow by a mask")
    sp.add_argument("--transform", required=True, help="transform JSON")
    sp.add_argument("--mask", required=True, help="PGM motion mask (sets the extent)")
    sp.add_argument("--out", required=True, help="output flow container (DFLW)")
    sp.set_defaults(fn=cmd_compose)

    sp = sub.add_parser("generate", help="run the generator on one source frame")
    sp.add_argument("--config", required=True, help="pipeline config JSON")
    sp.add_argument("--checkpoint", required=True, help="DCHK parameter checkpoint")
    sp.add_argument("--source", required=True, help="source PPM")
    sp.add_argument("--transform", required=True, help="driving transform JSON")
    sp.add_argument("--expression", required=True, help="JSON expression feature vector")
    sp.add_argument("--out", required=True, help="output PPM")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="train on the seeded synthetic dataset")
    sp.add_argument("--config", required=True, help="pipeline config JSON")
    sp.add_argument("--out", required=True, help="output DCHK checkpoint")
    sp.add_argument("--loss-csv", help="write per-step loss history CSV")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("grad-check", help="finite-difference checks of every VJP")
    sp.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULT_SEED})")
    sp.add_argument("--size", type=int, default=4, help="spatial size of instances")
    sp.add_argument("--instances", type=int, default=50,
                    help="seeded instances per operation")
    sp.add_argument("--defect", help="negative control: perturb the named VJP")
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("bench", help="time representative operations")
    sp.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULT_SEED})")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("accept", help="run acceptance criteria and write a report")
    sp.add_argument("--suite", default="all",
                    choices=["all", "geometry", "flow", "modconv", "pipeline"])
    sp.add_argument("--out", help="write the JSON report here")
    sp.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULT_SEED})")
    sp.add_argument("--steps", type=int, default=2000,
                    help="training steps for the pipeline suite")
    sp.add_argument("--workdir",
                    help="scratch directory for determinism artifacts "
                         "(default: a temporary directory, removed afterwards)")
    sp.set_defaults(fn=cmd_accept)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DomainError, ConfigError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"error: checkpoint/config mismatch, missing tensor {exc}",
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
