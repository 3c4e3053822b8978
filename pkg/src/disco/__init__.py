"""Geometric motion transfer toolkit.

Heatmap/keypoint-derived transforms, dense backward flows with masked
composition and warping, expression-modulated convolution, a desk-scale
trainable generator, and synthetic benchmarks with exact ground truth.
"""
import os as _os
import sys as _sys

# DISCO_THREADS caps BLAS parallelism; it must land in the environment
# before numpy loads its backend, hence here rather than in the CLI.
_cap = _os.environ.get("DISCO_THREADS")
if _cap and "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

from .errors import ConfigError, DomainError, NumericError
from .tensorops import Grid2D, bilinear_sample, bilinear_sample_vjp, make_grid
from .geometry import (Affine2D, Heatmap, KeypointSet, TPSTransform,
                       heatmap_to_affine, heatmap_translation, invert_affine,
                       relative_affine, tps_eval, tps_eval_points, tps_fit,
                       tps_radial, transform_from_json, transform_to_json)
from .flow import (ConfidenceMap, FlowField, MotionMask, apply_confidence,
                   coarse_flow_affine, coarse_flow_tps, compose_flow,
                   identity_flow, read_flow, warp_features, write_flow)
from .modconv import (ConvKernel, ExpressionFeature, ScaleHead, ScaleVector,
                      conv2d, expression_scales, load_checkpoint,
                      modconv_forward, modconv_vjp, modulate_weights,
                      save_checkpoint)
from .pipeline import (EncoderOutput, PipelineConfig, align, decode, encode,
                       generate, init_params, loss, loss_and_grads)
from .synthbench import (SceneSpec, SyntheticScene, central_difference,
                         gaussian_heatmap, moment_oracle, psnr, render_scene,
                         ssim, tps_oracle)
from .training import TrainState, evaluate_psnr, make_dataset, train

__version__ = "0.1.0"
