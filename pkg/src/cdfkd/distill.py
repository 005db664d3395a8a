"""Frozen-teacher cross-domain feature distillation.

Each step pairs a clean image (teacher input) with its corrupted-and-
downscaled twin (student input). The student minimizes

    total = det + alpha * global + beta * instance

where `det` is the detection loss on the diversified image against
ratio-scaled boxes, `global` is the per-image cosine distance between the
teacher feature map and the student map bilinear-resized to match, and
`instance` is the cosine distance between RoI-aligned feature crops —
teacher pooled over the original boxes, student over the ratio-scaled
boxes, matched by annotation index. Teacher activations are computed off
the tape, so gradients only ever reach student parameters. Batch
aggregation uses order-independent scalar means, making both distillation
terms invariant to annotation order down to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corruption import DiversifyDraw, sample_diversify
from .detector import DetectorModel, assign_targets, detection_loss
from .kernels import FeatureMap, bilinear_resize, cosine_loss, roi_align
from .scenes import Annotation, Scene
from .tensor import ShapeError, Tape, Tensor, flatten, mean_scalars, mul, select, sgd_step

__all__ = [
    "DistillConfig",
    "DistillSample",
    "DistillBatch",
    "LossBreakdown",
    "diversify_sample",
    "global_distill_loss",
    "instance_distill_loss",
    "distill_step",
    "loss_csv_header",
    "loss_csv_line",
]


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    roi_out: int = 7
    roi_samples: int = 2
    min_feature_box: float = 0.25  # feature-space extent below which an instance is skipped

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha} beta={self.beta}")
        if self.roi_out < 1 or self.roi_samples < 1:
            raise ValueError("roi_out and roi_samples must be >= 1")


@dataclass
class DistillSample:
    clean_image: np.ndarray
    div_image: np.ndarray
    draw: DiversifyDraw | None  # None when the sample was left clean
    annotations: list[Annotation]  # original pixel coordinates
    scaled_annotations: list[Annotation]  # ratio-scaled to the diversified image

    @property
    def scale_ratio(self) -> float:
        return self.draw.scale_ratio if self.draw is not None else 1.0


@dataclass
class DistillBatch:
    samples: list[DistillSample]
    teacher_maps: list[FeatureMap] | None = None  # optional precomputed features


def diversify_sample(
    scene: Scene, rng: np.random.Generator, corrupt: bool = True, rescale: bool = True
) -> DistillSample:
    """Build one teacher/student input pair from a labeled scene.

    `corrupt=False` leaves the student input clean (the baseline
    configuration); `rescale=False` keeps the corruption draw but forces the
    downscale ratio to 1 (the corruption-only ablation). The scaled
    annotation list always has the same length as the original.
    """
    if not corrupt:
        return DistillSample(
            clean_image=scene.image,
            div_image=scene.image,
            draw=None,
            annotations=list(scene.annotations),
            scaled_annotations=list(scene.annotations),
        )
    div, draw = sample_diversify(scene.image, rng, rescale=rescale)
    h, w = div.shape[:2]
    r = draw.scale_ratio
    scaled = [Annotation(a.class_id, a.box.scaled(r).clipped(w, h)) for a in scene.annotations]
    return DistillSample(
        clean_image=scene.image,
        div_image=div,
        draw=draw,
        annotations=list(scene.annotations),
        scaled_annotations=scaled,
    )


def global_distill_loss(f_t: FeatureMap, f_s: FeatureMap) -> Tensor:
    """Per-image global term: cosine distance between the teacher map and
    the student map resized to the teacher's spatial extents."""
    ct, ht, wt = f_t.tensor.shape
    cs = f_s.tensor.shape[0]
    if ct != cs:
        raise ShapeError(f"global distillation: teacher has {ct} channels, student {cs}")
    student = f_s.tensor
    if student.shape != f_t.tensor.shape:
        student = bilinear_resize(student, ht, wt)
    return cosine_loss(flatten(f_t.tensor), flatten(student))


def _instance_losses(
    f_t: FeatureMap,
    f_s: FeatureMap,
    annotations: list[Annotation],
    ratio: float,
    cfg: DistillConfig,
) -> tuple[list[Tensor], int]:
    """Per-instance cosine terms for one image, plus the skip count.

    A pair is skipped when either side's feature-space box extent falls
    below cfg.min_feature_box cells.
    """
    if not annotations:
        return [], 0
    kept_t, kept_s = [], []
    skipped = 0
    for a in annotations:
        sb = a.box.scaled(ratio)
        t_extent = min(a.box.width, a.box.height) / f_t.stride
        s_extent = min(sb.width, sb.height) / f_s.stride
        if t_extent < cfg.min_feature_box or s_extent < cfg.min_feature_box:
            skipped += 1
            continue
        kept_t.append(a.box)
        kept_s.append(sb)
    if not kept_t:
        return [], skipped
    pooled_t, miss_t = roi_align(f_t, kept_t, out=cfg.roi_out, samples=cfg.roi_samples)
    pooled_s, miss_s = roi_align(f_s, kept_s, out=cfg.roi_out, samples=cfg.roi_samples)
    if miss_t or miss_s:
        raise AssertionError("roi_align skipped a box that passed the distillation filter")
    losses = [
        cosine_loss(flatten(select(pooled_t, j)), flatten(select(pooled_s, j)))
        for j in range(len(kept_t))
    ]
    return losses, skipped


def instance_distill_loss(
    f_t: FeatureMap,
    f_s: FeatureMap,
    annotations: list[Annotation],
    ratio: float,
    cfg: DistillConfig,
) -> tuple[Tensor, int]:
    """Mean per-instance cosine distance for one image; zero when every
    instance is skipped or the image has no annotations."""
    losses, skipped = _instance_losses(f_t, f_s, annotations, ratio, cfg)
    if not losses:
        return Tensor(np.zeros((), dtype=np.float32)), skipped
    return mean_scalars(losses), skipped


@dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    l_global: float
    l_instance: float
    l_total: float
    skipped_instances: int

    @classmethod
    def build(cls, l_det: float, l_global: float, l_instance: float, alpha: float, beta: float, skipped: int) -> "LossBreakdown":
        # Pinned accumulation order; the identity
        # l_total == l_det + alpha*l_global + beta*l_instance is exact.
        total = l_det + alpha * l_global + beta * l_instance
        return cls(
            l_det=l_det,
            l_global=l_global,
            l_instance=l_instance,
            l_total=total,
            skipped_instances=skipped,
        )


def distill_step(
    teacher: DetectorModel,
    student: DetectorModel,
    batch: DistillBatch,
    cfg: DistillConfig,
    lr: float = 0.01,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> LossBreakdown:
    """One optimizer step of the student; the teacher is inference-only.

    The global and instance terms are only evaluated when their weights are
    positive, which also spares the teacher forward pass when neither
    distillation loss is enabled.
    """
    if not teacher.frozen():
        raise ValueError("teacher has trainable parameters; freeze it before distillation")
    if not batch.samples:
        raise ValueError("empty distillation batch")

    use_feats = cfg.alpha > 0 or cfg.beta > 0
    teacher_maps = batch.teacher_maps
    if use_feats and teacher_maps is None:
        teacher_maps = [teacher.forward_backbone(s.clean_image) for s in batch.samples]

    skipped_total = 0
    with Tape() as tape:
        stensors = student.tensors()
        det_terms, global_terms, instance_terms = [], [], []
        for i, sample in enumerate(batch.samples):
            fm_s, preds = student.forward(sample.div_image, stensors)
            hg, wg = fm_s.tensor.shape[1:]
            targets = assign_targets(sample.scaled_annotations, (hg, wg), fm_s.stride)
            det_terms.append(detection_loss(preds, targets).total)
            if cfg.alpha > 0:
                global_terms.append(global_distill_loss(teacher_maps[i], fm_s))
            if cfg.beta > 0:
                losses, skipped = _instance_losses(
                    teacher_maps[i], fm_s, sample.annotations, sample.scale_ratio, cfg
                )
                instance_terms.extend(losses)
                skipped_total += skipped
        l_det = mean_scalars(det_terms)
        total = l_det
        l_global = l_instance = None
        if cfg.alpha > 0:
            l_global = mean_scalars(global_terms)
            total = total + mul(l_global, cfg.alpha)
        if cfg.beta > 0 and instance_terms:
            l_instance = mean_scalars(instance_terms)
            total = total + mul(l_instance, cfg.beta)
        grads = tape.backward(total)

    by_name = {
        name: grads[t.node] for name, t in stensors.items() if t.node is not None
    }
    sgd_step(student.params, by_name, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return LossBreakdown.build(
        l_det=float(l_det.data),
        l_global=float(l_global.data) if l_global is not None else 0.0,
        l_instance=float(l_instance.data) if l_instance is not None else 0.0,
        alpha=cfg.alpha,
        beta=cfg.beta,
        skipped=skipped_total,
    )


def loss_csv_header() -> str:
    return "step,l_det,l_global,l_instance,l_total,skipped_instances,lr"


def loss_csv_line(step: int, bd: LossBreakdown, lr: float) -> str:
    return (
        f"{step},{bd.l_det!r},{bd.l_global!r},{bd.l_instance!r},"
        f"{bd.l_total!r},{bd.skipped_instances},{lr!r}"
    )
