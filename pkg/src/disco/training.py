"""Seeded dataset construction and the Adam training loop.

Training bypasses the heatmap/keypoint predictors: every sample carries its
exact relative transform from the synthetic generator, so gradients flow
through warping, encoding, and decoding but never through the transform
extraction itself.

Batch elements may evaluate on a small thread pool (capped by the
DISCO_THREADS environment variable, default: hardware count); gradients are
always reduced in batch order, so results are bitwise independent of the
worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DomainError, NumericError
from .pipeline import PipelineConfig, init_params, loss_and_grads, generate
from .synthbench import SceneSpec, psnr, render_scene, scene_spec_from_dict


def thread_cap() -> int:
    """Worker count from DISCO_THREADS, defaulting to the hardware count."""
    raw = os.environ.get("DISCO_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class TrainState:
    """Learnable parameters plus Adam moments and the recorded loss curve."""

    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    loss_history: list = field(default_factory=list)


def scene_spec_for(config: PipelineConfig) -> SceneSpec:
    """Scene spec matching the pipeline config, with optional overrides."""
    doc = {"image_size": config.image_size,
           "transform": config.transform,
           "expression_dim": config.expression_dim}
    if config.scene:
        doc.update(config.scene)
    return scene_spec_from_dict(doc)


def make_dataset(config: PipelineConfig):
    """Seeded scene list split into (train, holdout)."""
    spec = scene_spec_for(config)
    scenes = [render_scene(config.seed * 1000 + i, spec)
              for i in range(config.dataset_size)]
    split = config.dataset_size - config.holdout
    return scenes[:split], scenes[split:]


def init_state(config: PipelineConfig) -> TrainState:
    params = init_params(config, np.random.default_rng(config.seed))
    return TrainState(params=params,
                      adam_m={k: np.zeros_like(v) for k, v in params.items()},
                      adam_v={k: np.zeros_like(v) for k, v in params.items()},
                      step=0)


def _first_non_finite(state: TrainState, grads: dict) -> str:
    for name in sorted(state.params):
        if not np.all(np.isfinite(state.params[name])):
            return f"parameter {name}"
    for name in sorted(grads):
        g = grads[name]
        if g is not None and not np.all(np.isfinite(g)):
            return f"gradient of {name}"
    return "loss"


def adam_step(state: TrainState, grads: dict, config: PipelineConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name in sorted(state.params):
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        state.params[name] -= config.lr * mhat / (np.sqrt(vhat) + config.adam_eps)


def train(dataset, config: PipelineConfig, state: TrainState | None = None,
          callback=None) -> TrainState:
    """Run ``config.steps`` Adam steps over the dataset.

    Batches cycle through seeded permutations of the dataset; gradients are
    averaged in fixed batch order, so a fixed seed reproduces the loss
    history bitwise. Raises NumericError naming the first non-finite tensor
    if the loss degenerates.
    """
    if state is None:
        state = init_state(config)
    order_rng = np.random.default_rng(config.seed + 1)
    n = len(dataset)
    batch = min(config.batch_size, n)
    workers = min(thread_cap(), batch)

    def run_one(scene):
        try:
            value, g, _ = loss_and_grads(
                state.params, config, scene.source, scene.transform,
                scene.f_exp, scene.driving)
        except DomainError:
            # A non-finite intermediate trips input validation before the
            # loss itself degenerates; diagnose which tensor went bad.
            culprit = _first_non_finite(state, {})
            if culprit == "loss":
                raise
            raise NumericError(
                f"non-finite values at step {state.step}: first non-finite "
                f"tensor is {culprit}") from None
        return value, g

    queue = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        # One BLAS thread per worker measures fastest at these sizes and
        # keeps per-sample arithmetic order fixed.
        with threadpool_limits(limits=1):
            for _ in range(config.steps):
                if len(queue) < batch:
                    queue.extend(order_rng.permutation(n).tolist())
                idx = [queue.pop(0) for _ in range(batch)]
                scenes = [dataset[i] for i in idx]
                if pool is None:
                    results = [run_one(s) for s in scenes]
                else:
                    results = [f.result()
                               for f in [pool.submit(run_one, s) for s in scenes]]
                total = 0.0
                grads = None
                for value, g in results:  # fixed batch order
                    total += value
                    if grads is None:
                        grads = g
                    else:
                        for name in g:
                            grads[name] += g[name]
                total /= batch
                for name in grads:
                    grads[name] /= batch
                if not np.isfinite(total):
                    raise NumericError(
                        f"non-finite loss at step {state.step}: first non-finite "
                        f"tensor is {_first_non_finite(state, grads)}")
                adam_step(state, grads, config)
                state.loss_history.append(total)
                if callback is not None:
                    callback(state, total)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def evaluate_psnr(params, config: PipelineConfig, scenes) -> float:
    """Mean reconstruction PSNR of generated frames against driving targets."""
    vals = [psnr(generate(s.source, s.transform, s.f_exp, params, config),
                 s.driving)
            for s in scenes]
    return float(np.mean(vals))


def evaluate_loss(params, config: PipelineConfig, scenes) -> float:
    """Mean L1 reconstruction loss over scenes (no gradients)."""
    total = 0.0
    for s in scenes:
        pred = generate(s.source, s.transform, s.f_exp, params, config)
        total += float(np.mean(np.abs(pred - s.driving)))
    return total / len(scenes)
