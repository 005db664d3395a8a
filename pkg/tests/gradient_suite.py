"""Finite-difference instances for every differentiable kernel.

Each entry builds a seeded random instance and returns the normalized
gradient error from `check_gradients` run in float32. Inputs are drawn to
stay away from non-differentiable points (relu kinks, pooling ties, the
smooth-L1 elbow), since central differences are meaningless across them.
"""

from __future__ import annotations

import numpy as np

from cdfkd.distill import DistillConfig, global_distill_loss, instance_distill_loss
from cdfkd.scenes import Annotation
from cdfkd.kernels import (
    FeatureMap,
    RoiBox,
    bce_with_logits,
    bilinear_resize,
    conv2d,
    cosine_loss,
    max_pool2d,
    roi_align,
    smooth_l1,
    softmax_ce,
    softmax_ce_rows,
)
from cdfkd.gradcheck import check_gradients
from cdfkd.tensor import mean_all

F32 = np.float32


def _conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride = 2 if seed % 2 else 1
    h = 5 if stride == 2 else 6
    x = rng.normal(0, 0.5, (2, h, h)).astype(F32)
    w = rng.normal(0, 0.5, (3, 2, 3, 3)).astype(F32)
    b = rng.normal(0, 0.5, 3).astype(F32)
    pad = 1 if stride == 2 else 0
    return check_gradients(lambda t: mean_all(conv2d(t[0], t[1], t[2], stride=stride, pad=pad)), [x, w, b])


def _pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    # a scaled permutation keeps every window free of ties
    x = (rng.permutation(2 * 4 * 6).astype(F32) * 0.1).reshape(2, 4, 6)
    return check_gradients(lambda t: mean_all(max_pool2d(t[0], 2)), [x])


def _resize(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (3, 5, 4)).astype(F32)
    oh, ow = [(7, 9), (3, 2), (5, 4), (10, 3)][seed % 4]
    return check_gradients(lambda t: mean_all(bilinear_resize(t[0], oh, ow)), [x])


def _roi(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (3, 8, 8)).astype(F32)
    boxes = []
    for _ in range(3):
        x0, y0 = rng.uniform(0, 4, 2)
        boxes.append(RoiBox(x0, y0, x0 + rng.uniform(2, 3.5), y0 + rng.uniform(2, 3.5)))

    def fn(t):
        pooled, skipped = roi_align(FeatureMap(t[0], stride=1), boxes, out=3, samples=2)
        assert not skipped
        return mean_all(pooled)

    return check_gradients(fn, [x])


def _cosine(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, 16).astype(F32)
    b = rng.normal(0, 1, 16).astype(F32)
    return check_gradients(lambda t: cosine_loss(t[0], t[1]), [a, b])


def _smooth_l1(seed: int) -> float:
    rng = np.random.default_rng(seed)
    target = rng.normal(0, 1, (4, 4)).astype(F32)
    # half the residuals in the quadratic zone, half in the linear zone,
    # all at least 0.1 away from the |d| = 1 elbow
    d = np.where(rng.random((4, 4)) < 0.5, rng.uniform(-0.6, 0.6, (4, 4)), rng.choice([-1, 1], (4, 4)) * rng.uniform(1.4, 2.5, (4, 4)))
    pred = (target + d).astype(F32)
    return check_gradients(lambda t: smooth_l1(t[0], t[1]), [pred, target])


def _bce(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = rng.uniform(-2, 2, (1, 4, 5)).astype(F32)
    tgt = (rng.random((1, 4, 5)) < 0.3).astype(F32)
    return check_gradients(lambda t: bce_with_logits(t[0], tgt), [z])


def _softmax_ce(seed: int) -> float:
    rng = np.random.default_rng(seed)
    if seed % 2:
        z = rng.normal(0, 1, 6).astype(F32)
        cls = int(rng.integers(0, 6))
        return check_gradients(lambda t: softmax_ce(t[0], cls), [z])
    z = rng.normal(0, 1, (5, 4)).astype(F32)
    classes = rng.integers(0, 4, 5)
    return check_gradients(lambda t: softmax_ce_rows(t[0], classes), [z])


def _global_pipeline(seed: int) -> float:
    # clean-map vs resized-map cosine, differentiated through the resize
    rng = np.random.default_rng(seed)
    f_t = rng.normal(0, 1, (4, 6, 6)).astype(F32)
    f_s = rng.normal(0, 1, (4, 4, 5)).astype(F32)

    def fn(t):
        return global_distill_loss(FeatureMap(t[0], stride=8), FeatureMap(t[1], stride=8))

    return check_gradients(fn, [f_t, f_s], wrt=[1])


def _instance_pipeline(seed: int) -> float:
    # per-box RoI pooling on both maps, cosine per instance, mean
    rng = np.random.default_rng(seed)
    f_t = rng.normal(0, 1, (4, 8, 8)).astype(F32)
    f_s = rng.normal(0, 1, (4, 7, 7)).astype(F32)
    anns = [
        Annotation(class_id=0, box=RoiBox(4.0, 6.0, 40.0, 44.0)),
        Annotation(class_id=1, box=RoiBox(20.0, 16.0, 58.0, 60.0)),
    ]
    cfg = DistillConfig(roi_out=3, roi_samples=2)

    def fn(t):
        loss, skipped = instance_distill_loss(
            FeatureMap(t[0], stride=8), FeatureMap(t[1], stride=8), anns, 0.875, cfg
        )
        assert skipped == 0
        return loss

    return check_gradients(fn, [f_t, f_s], wrt=[1])


KERNELS = {
    "conv2d": _conv,
    "max_pool2d": _pool,
    "bilinear_resize": _resize,
    "roi_align": _roi,
    "cosine_loss": _cosine,
    "smooth_l1": _smooth_l1,
    "bce_with_logits": _bce,
    "softmax_ce": _softmax_ce,
    "global_distill_pipeline": _global_pipeline,
    "instance_distill_pipeline": _instance_pipeline,
}

SEEDS = range(10)

INSTANCES = [(name, seed) for name in KERNELS for seed in SEEDS]


def run_instance(name: str, seed: int) -> float:
    return KERNELS[name](seed)


def run_suite() -> dict[str, float]:
    """Worst normalized gradient error per kernel over all seeds."""
    return {name: max(fn(seed) for seed in SEEDS) for name, fn in KERNELS.items()}
