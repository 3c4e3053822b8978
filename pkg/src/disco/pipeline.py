"""Toy motion-transfer generator built from the warping and modconv blocks.

The encoder sees the source plus its geometrically transformed copy,
emits a feature map, a confidence map, and (dense-motion variant) a motion
mask. Alignment either warps the feature by the mask-blended flow or, in
the neural-mix variant, trusts the encoder to have mixed the two views.
The decoder refines the confidence-gated feature through expression-
modulated residual blocks and upsampling back to RGB.

Every learnable block has an explicit backward; ``loss_and_grads`` wires
them into one reverse pass for the training loop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DomainError
from .flow import (ConfidenceMap, FlowField, MotionMask, apply_confidence,
                   coarse_flow_affine, coarse_flow_tps, compose_flow,
                   identity_flow, warp_features)
from .geometry import Affine2D, TPSTransform
from .modconv import (ConvKernel, ExpressionFeature, ScaleHead,
                      conv2d_cached, conv2d_vjp, expression_scales,
                      expression_scales_vjp, leaky_relu, leaky_relu_vjp,
                      modconv_cached, modconv_cached_vjp, sigmoid, sigmoid_vjp,
                      upsample_bilinear, upsample_bilinear_vjp)
from .tensorops import as_tensor, bilinear_sample_vjp

VARIANTS = ("dense-motion", "neural-mix")
TRANSFORM_KINDS = ("affine", "tps")
DOWNSAMPLE_FACTOR = 8  # three stride-2 blocks


@dataclass(frozen=True)
class EncoderOutput:
    """Feature map plus confidence (and, dense-motion only, a motion mask)."""

    feature: np.ndarray          # [C, h, w]
    confidence: ConfidenceMap    # [1, h, w]
    mask: MotionMask | None      # [h, w] or None

    def __post_init__(self):
        hw = self.feature.shape[1:]
        if self.confidence.values.shape[1:] != hw:
            raise DomainError("confidence extent does not match feature")
        if self.mask is not None and self.mask.values.shape != hw:
            raise DomainError("mask extent does not match feature")


@dataclass(frozen=True)
class PipelineConfig:
    """Architecture, optimizer, and dataset knobs for the toy pipeline."""

    variant: str = "dense-motion"
    transform: str = "affine"
    image_size: int = 64
    widths: tuple = (32, 64, 128)
    feature_channels: int = 128
    mod_blocks: int = 6
    expression_dim: int = 16
    eps_mod: float = 1e-8
    eps_cov: float = 1e-6
    loss_lambda: float = 0.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    steps: int = 2000
    seed: int = 42
    dataset_size: int = 200
    holdout: int = 20
    scene: dict | None = None  # SceneSpec overrides for the dataset

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.transform not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.transform!r}")
        if self.image_size % DOWNSAMPLE_FACTOR != 0 or self.image_size <= 0:
            raise ConfigError(
                f"image size must be a positive multiple of {DOWNSAMPLE_FACTOR}, "
                f"got {self.image_size}")
        if len(self.widths) != 3:
            raise ConfigError(f"widths must have 3 entries, got {self.widths}")
        if not 0 <= self.holdout < self.dataset_size:
            raise ConfigError(
                "holdout must be nonnegative and smaller than the dataset")

    @property
    def feature_size(self) -> int:
        return self.image_size // DOWNSAMPLE_FACTOR


def config_to_json(cfg: PipelineConfig) -> str:
    doc = asdict(cfg)
    doc["widths"] = list(doc["widths"])
    return json.dumps(doc, indent=2) + "\n"


def config_from_json(text: str) -> PipelineConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid config JSON: {exc}") from exc
    known = set(PipelineConfig.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    if "widths" in doc:
        doc["widths"] = tuple(doc["widths"])
    return PipelineConfig(**doc)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(cfg: PipelineConfig, rng: np.random.Generator) -> dict:
    """He-style initialization; scale heads start at zero so scales are 1."""
    w0, w1, w2 = cfg.widths
    feat = cfg.feature_channels
    params = {}

    def conv(name, out_c, in_c, k):
        std = np.sqrt(2.0 / (in_c * k * k))
        params[f"{name}.w"] = rng.normal(0.0, std, size=(out_c, in_c, k, k))
        params[f"{name}.b"] = np.zeros(out_c)

    conv("enc.down0", w0, 6, 3)
    conv("enc.down1", w1, w0, 3)
    conv("enc.down2", w2, w1, 3)
    conv("enc.feat", feat, w2, 1)
    conv("enc.conf", 1, w2, 1)
    if cfg.variant == "dense-motion":
        conv("enc.mask", 1, w2, 1)
    for i in range(cfg.mod_blocks):
        conv(f"dec.mod{i}", feat, feat, 3)
        params[f"dec.mod{i}.sw"] = np.zeros((feat, cfg.expression_dim))
        params[f"dec.mod{i}.sb"] = np.zeros(feat)
    conv("dec.up0", w1, feat, 3)
    conv("dec.up1", w0, w1, 3)
    conv("dec.up2", w0, w0, 3)
    conv("dec.out", 3, w0, 7)
    return params


def _zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def coarse_flow_for(transform, height: int, width: int) -> FlowField:
    """Coarse flow for either transform kind at the requested resolution."""
    if isinstance(transform, Affine2D):
        return coarse_flow_affine(transform, height, width)
    if isinstance(transform, TPSTransform):
        return coarse_flow_tps(transform, height, width)
    raise DomainError(f"not a transform: {type(transform).__name__}")


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def _encode_fwd(params, variant, source, transformed):
    source = as_tensor(source, "source")
    transformed = as_tensor(transformed, "transformed source")
    if source.shape != transformed.shape or source.ndim != 3 or source.shape[0] != 3:
        raise DomainError(
            f"encoder inputs must be matching [3,H,W], got {source.shape} "
            f"and {transformed.shape}")
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    x = np.concatenate([source, transformed], axis=0)
    cache = {"variant": variant}
    h = x
    for i in range(3):
        y, cache[f"down{i}"] = conv2d_cached(
            h, params[f"enc.down{i}.w"], params[f"enc.down{i}.b"], stride=2)
        cache[f"down{i}.pre"] = y
        h = leaky_relu(y)
    feat, cache["feat"] = conv2d_cached(h, params["enc.feat.w"], params["enc.feat.b"])
    conf_pre, cache["conf"] = conv2d_cached(h, params["enc.conf.w"], params["enc.conf.b"])
    conf = sigmoid(conf_pre)
    cache["conf.out"] = conf
    mask = None
    if variant == "dense-motion":
        mask_pre, cache["mask"] = conv2d_cached(
            h, params["enc.mask.w"], params["enc.mask.b"])
        mask = sigmoid(mask_pre)
        cache["mask.out"] = mask
    out = EncoderOutput(
        feature=feat,
        confidence=ConfidenceMap(conf),
        mask=None if mask is None else MotionMask(mask[0]))
    return out, cache


def _encode_bwd(cache, g_feat, g_conf, g_mask, grads):
    gx_f, grads["enc.feat.w"], grads["enc.feat.b"] = conv2d_vjp(cache["feat"], g_feat)
    g_conf_pre = sigmoid_vjp(cache["conf.out"], g_conf)
    gx_c, grads["enc.conf.w"], grads["enc.conf.b"] = conv2d_vjp(cache["conf"], g_conf_pre)
    gh = gx_f + gx_c
    if cache["variant"] == "dense-motion":
        g_mask_pre = sigmoid_vjp(cache["mask.out"], g_mask[None] if g_mask.ndim == 2 else g_mask)
        gx_m, grads["enc.mask.w"], grads["enc.mask.b"] = conv2d_vjp(cache["mask"], g_mask_pre)
        gh = gh + gx_m
    for i in (2, 1, 0):
        gpre = leaky_relu_vjp(cache[f"down{i}.pre"], gh)
        need = i > 0
        gh, grads[f"enc.down{i}.w"], grads[f"enc.down{i}.b"] = conv2d_vjp(
            cache[f"down{i}"], gpre, need_input=need)


def encode(source, transformed_source, params, variant: str) -> EncoderOutput:
    """Encode the source/transformed pair into feature, confidence, (mask)."""
    out, _ = _encode_fwd(params, variant, source, transformed_source)
    return out


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def _align_fwd(enc: EncoderOutput, transform, variant):
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    if variant == "neural-mix":
        if enc.mask is not None:
            raise DomainError("neural-mix encoder output must not carry a mask")
        return enc.feature, {"variant": variant}
    if enc.mask is None:
        raise DomainError("dense-motion alignment requires a motion mask")
    h, w = enc.feature.shape[1:]
    o_i = identity_flow(h, w)
    o_t = coarse_flow_for(transform, h, w)
    o_p = compose_flow(enc.mask, o_i, o_t)
    aligned = warp_features(enc.feature, o_p)
    cache = {"variant": variant, "feature": enc.feature, "o_p": o_p,
             "flow_diff": o_t.coords - o_i.coords}
    return aligned, cache


def _align_bwd(cache, g_aligned):
    if cache["variant"] == "neural-mix":
        return g_aligned, None
    g_feat, g_coords = bilinear_sample_vjp(
        cache["feature"], cache["o_p"].coords, g_aligned)
    g_mask = (g_coords * cache["flow_diff"]).sum(axis=-1)
    return g_feat, g_mask


def align(enc: EncoderOutput, transform, variant: str) -> np.ndarray:
    """Warp the encoder feature by the mask-blended flow (dense-motion) or
    return it unchanged (neural-mix)."""
    aligned, _ = _align_fwd(enc, transform, variant)
    return aligned


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def _mod_block_count(params) -> int:
    n = 0
    while f"dec.mod{n}.w" in params:
        n += 1
    return n


def _decode_fwd(params, e, f_exp: ExpressionFeature, eps_mod: float):
    e = as_tensor(e, "decoder input")
    if e.ndim != 3:
        raise DomainError(f"decoder input must be [C,h,w], got shape {e.shape}")
    cache = {"blocks": _mod_block_count(params), "eps": eps_mod}
    h = e
    for i in range(cache["blocks"]):
        head = ScaleHead(params[f"dec.mod{i}.sw"], params[f"dec.mod{i}.sb"])
        scales = expression_scales(f_exp, head)
        kern = ConvKernel(params[f"dec.mod{i}.w"], params[f"dec.mod{i}.b"])
        pre, cache[f"mod{i}"] = modconv_cached(h, kern, scales, eps_mod)
        cache[f"mod{i}.pre"] = pre
        h = h + leaky_relu(pre)
    for i in range(3):
        hh, ww = h.shape[1] * 2, h.shape[2] * 2
        cache[f"up{i}.in"] = h
        up = upsample_bilinear(h, hh, ww)
        pre, cache[f"up{i}"] = conv2d_cached(
            up, params[f"dec.up{i}.w"], params[f"dec.up{i}.b"])
        cache[f"up{i}.pre"] = pre
        h = leaky_relu(pre)
    pre, cache["out"] = conv2d_cached(h, params["dec.out.w"], params["dec.out.b"])
    rgb = sigmoid(pre)
    cache["out.rgb"] = rgb
    cache["f_exp"] = f_exp
    return rgb, cache


def _decode_bwd(params, cache, g_rgb, grads):
    g = sigmoid_vjp(cache["out.rgb"], g_rgb)
    gh, grads["dec.out.w"], grads["dec.out.b"] = conv2d_vjp(cache["out"], g)
    for i in (2, 1, 0):
        gpre = leaky_relu_vjp(cache[f"up{i}.pre"], gh)
        gup, grads[f"dec.up{i}.w"], grads[f"dec.up{i}.b"] = conv2d_vjp(
            cache[f"up{i}"], gpre)
        x = cache[f"up{i}.in"]
        gh = upsample_bilinear_vjp(x, x.shape[1] * 2, x.shape[2] * 2, gup)
    f_exp = cache["f_exp"]
    for i in reversed(range(cache["blocks"])):
        gpre = leaky_relu_vjp(cache[f"mod{i}.pre"], gh)
        gx, gw, gs, gb = modconv_cached_vjp(cache[f"mod{i}"], gpre)
        grads[f"dec.mod{i}.w"] = gw
        grads[f"dec.mod{i}.b"] = gb
        head = ScaleHead(params[f"dec.mod{i}.sw"], params[f"dec.mod{i}.sb"])
        _, gsw, gsb = expression_scales_vjp(f_exp, head, gs)
        grads[f"dec.mod{i}.sw"] = gsw
        grads[f"dec.mod{i}.sb"] = gsb
        gh = gh + gx
    return gh


def decode(e, f_exp: ExpressionFeature, params, eps_mod: float = 1e-8) -> np.ndarray:
    """Decode a confidence-gated aligned feature into an RGB image in [0,1]."""
    rgb, _ = _decode_fwd(params, e, f_exp, eps_mod)
    return rgb


# ---------------------------------------------------------------------------
# Loss (L1 plus a pluggable perceptual term, disabled by default)
# ---------------------------------------------------------------------------

def loss(predicted, target, lam: float = 0.0, perceptual=None):
    """Mean-absolute reconstruction loss, optionally plus lam * perceptual.

    Returns ``(value, grad_wrt_predicted)``. The perceptual backend is a
    callable ``(predicted, target) -> (value, grad)``; none ships with this
    build, so ``lam`` must be 0 unless one is supplied.
    """
    predicted = as_tensor(predicted, "predicted")
    target = as_tensor(target, "target")
    if predicted.shape != target.shape:
        raise DomainError(
            f"loss shapes differ: {predicted.shape} vs {target.shape}")
    if lam < 0.0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    if lam > 0.0 and perceptual is None:
        raise ConfigError("perceptual weight is positive but no backend is registered")
    diff = predicted - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if lam > 0.0:
        pv, pg = perceptual(predicted, target)
        value += lam * pv
        grad = grad + lam * pg
    return value, grad


# ---------------------------------------------------------------------------
# End-to-end forward and training gradients
# ---------------------------------------------------------------------------

def generate(source, driving_transform, f_exp: ExpressionFeature, params,
             config: PipelineConfig) -> np.ndarray:
    """Full forward pass: warp, encode, align, confidence-gate, decode."""
    out, _ = _generate_fwd(params, config, source, driving_transform, f_exp)
    return out


def _generate_fwd(params, config, source, driving_transform, f_exp):
    source = as_tensor(source, "source")
    size = config.image_size
    if source.shape != (3, size, size):
        raise DomainError(
            f"source shape {source.shape} does not match configured "
            f"{(3, size, size)}")
    full_flow = coarse_flow_for(driving_transform, size, size)
    transformed = warp_features(source, full_flow)
    enc, enc_cache = _encode_fwd(params, config.variant, source, transformed)
    aligned, align_cache = _align_fwd(enc, driving_transform, config.variant)
    # sole construction path: the decoder only ever sees the gated feature
    gated = apply_confidence(enc.confidence, aligned)
    rgb, dec_cache = _decode_fwd(params, gated, f_exp, config.eps_mod)
    cache = {"enc": enc_cache, "align": align_cache, "dec": dec_cache,
             "conf": enc.confidence.values, "aligned": aligned}
    return rgb, cache


def _generate_bwd(params, cache, g_rgb):
    grads = {}
    g_gated = _decode_bwd(params, cache["dec"], g_rgb, grads)
    g_conf = (g_gated * cache["aligned"]).sum(axis=0, keepdims=True)
    g_aligned = g_gated * cache["conf"]
    g_feat, g_mask = _align_bwd(cache["align"], g_aligned)
    _encode_bwd(cache["enc"], g_feat, g_conf, g_mask, grads)
    return grads


def loss_and_grads(params, config: PipelineConfig, source, driving_transform,
                   f_exp: ExpressionFeature, target, perceptual=None):
    """Reconstruction loss and its gradient for every parameter tensor."""
    pred, cache = _generate_fwd(params, config, source, driving_transform, f_exp)
    value, g_pred = loss(pred, target, config.loss_lambda, perceptual)
    grads = _generate_bwd(params, cache, g_pred)
    return value, grads, pred
