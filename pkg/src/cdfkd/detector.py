"""Tiny single-stage detector used for both teacher and student.

Backbone: four 3x3 conv+relu blocks, channels 3-16-32-64-64 with three
stride-2 reductions, so the feature stride is 8. Inputs are reflect-padded
on the bottom/right to the next multiple of 8, which lets downscaled
student images of arbitrary size share one architecture. The head is three
1x1 convs per cell: an objectness logit, K class logits, and 4 box values
(sigmoid cell-center offsets plus log width/height relative to the padded
image extents). Each ground-truth box trains the cell containing its
center; when two boxes share a cell the larger area wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .imgio import to_float
from .kernels import FeatureMap, RoiBox, conv2d, pad2d, relu
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "STRIDE",
    "MIN_IMAGE_EXTENT",
    "DetectorModel",
    "DensePredictions",
    "Detection",
    "TargetMap",
    "DetectionLoss",
    "assign_targets",
    "detection_loss",
    "decode",
    "nms",
]

STRIDE = 8
MIN_IMAGE_EXTENT = 32
_BACKBONE = ((3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 64, 1))  # (cin, cout, stride)


@dataclass
class DensePredictions:
    objectness: Tensor  # [1, Hg, Wg]
    class_logits: Tensor  # [K, Hg, Wg]
    box_deltas: Tensor  # [4, Hg, Wg]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: RoiBox


@dataclass
class TargetMap:
    objectness: np.ndarray  # [1, Hg, Wg] of {0, 1}
    cells: np.ndarray  # [P, 2] (gy, gx) of positive cells
    classes: np.ndarray  # [P]
    deltas: np.ndarray  # [P, 4] (tx, ty, log w, log h)


@dataclass
class DetectionLoss:
    total: Tensor  # scalar, on tape
    objectness: float
    classification: float
    box: float


class DetectorModel:
    """Backbone + dense head with a named parameter manifest.

    Teacher and student are two instances of this class; the teacher is
    frozen (every parameter non-trainable) for distillation.
    """

    def __init__(self, num_classes: int = 5, seed: int = 0, role: str = "student"):
        if role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got '{role}'")
        self.num_classes = num_classes
        self.role = role
        rng = np.random.Generator(np.random.PCG64(seed))
        self.params: list[Parameter] = []
        for i, (cin, cout, _) in enumerate(_BACKBONE, start=1):
            self._add(rng, f"backbone.conv{i}.weight", (cout, cin, 3, 3))
            self._add(rng, f"backbone.conv{i}.bias", (cout,))
        feat = _BACKBONE[-1][1]
        for head, cout in (("obj", 1), ("cls", num_classes), ("box", 4)):
            self._add(rng, f"head.{head}.weight", (cout, feat, 1, 1), std=0.01)
            self._add(rng, f"head.{head}.bias", (cout,))
        # A negative objectness prior keeps early training from swamping the
        # loss with the ~97% negative cells.
        self.param_map["head.obj.bias"].value[:] = -3.0

    def _add(self, rng, name: str, shape: tuple, std: float | None = None):
        if len(shape) == 1:
            value = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = std if std is not None else float(np.sqrt(2.0 / fan_in))
            value = rng.normal(0.0, scale, shape).astype(np.float32)
        self.params.append(Parameter(name, value))

    @property
    def param_map(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(p.name, p.value.shape) for p in self.params]

    def freeze(self) -> None:
        for p in self.params:
            p.trainable = False

    def frozen(self) -> bool:
        return all(not p.trainable for p in self.params)

    def tensors(self) -> dict[str, Tensor]:
        """Materialize every parameter once for the current tape.

        Within one training step all forward passes must share these
        tensors, otherwise each image would get its own gradient leaf.
        """
        return {p.name: p.tensor() for p in self.params}

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    def load(self, path) -> None:
        arrays = load_checkpoint(path)
        names = list(arrays)
        expected = [p.name for p in self.params]
        if names != expected:
            raise ValueError(
                f"checkpoint manifest mismatch: expected {expected}, found {names}"
            )
        for p in self.params:
            if arrays[p.name].shape != p.value.shape:
                raise ShapeError(
                    f"checkpoint shape {arrays[p.name].shape} != {p.value.shape} for '{p.name}'"
                )
            p.value[:] = arrays[p.name]
            p.momentum[:] = 0.0

    # -- forward ------------------------------------------------------------

    @staticmethod
    def _prepare(img: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        if min(h, w) < MIN_IMAGE_EXTENT:
            raise ShapeError(f"image {h}x{w} below the minimum extent {MIN_IMAGE_EXTENT}")
        x = to_float(img) - np.float32(0.5)
        x = np.ascontiguousarray(x.transpose(2, 0, 1))
        ph, pw = (-h) % STRIDE, (-w) % STRIDE
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        return x

    def forward_backbone(self, img: np.ndarray, tensors: dict[str, Tensor] | None = None) -> FeatureMap:
        """Image (H x W x 3 uint8) -> stride-8 FeatureMap."""
        if tensors is None:
            tensors = self.tensors()
        x = Tensor(self._prepare(img))
        for i, (_, _, stride) in enumerate(_BACKBONE, start=1):
            if stride == 2:
                # Even extents admit no symmetric pad with an integral
                # stride-2 3x3 output, so pad top/left only: H -> H/2.
                x = pad2d(x, 1, 0, 1, 0)
                pad = 0
            else:
                pad = 1
            x = conv2d(x, tensors[f"backbone.conv{i}.weight"], tensors[f"backbone.conv{i}.bias"], stride=stride, pad=pad)
            x = relu(x)
        return FeatureMap(tensor=x, stride=STRIDE)

    def forward(self, img: np.ndarray, tensors: dict[str, Tensor] | None = None) -> tuple[FeatureMap, DensePredictions]:
        if tensors is None:
            tensors = self.tensors()
        fm = self.forward_backbone(img, tensors)
        heads = {
            name: conv2d(fm.tensor, tensors[f"head.{name}.weight"], tensors[f"head.{name}.bias"])
            for name in ("obj", "cls", "box")
        }
        preds = DensePredictions(
            objectness=heads["obj"], class_logits=heads["cls"], box_deltas=heads["box"]
        )
        return fm, preds


def assign_targets(
    annotations, grid_hw: tuple[int, int], stride: int = STRIDE
) -> TargetMap:
    """Center-cell assignment: each box trains the cell holding its center.

    On collisions the larger-area box keeps the cell (ties: earlier
    annotation); the loser is simply absent from the detection targets.
    """
    hg, wg = grid_hw
    owner: dict[tuple[int, int], int] = {}
    order = sorted(range(len(annotations)), key=lambda i: (annotations[i].box.area, -i))
    for i in order:
        cx, cy = annotations[i].box.center()
        gx = min(int(cx // stride), wg - 1)
        gy = min(int(cy // stride), hg - 1)
        owner[(gy, gx)] = i
    obj = np.zeros((1, hg, wg), dtype=np.float32)
    cells, classes, deltas = [], [], []
    for (gy, gx), i in owner.items():
        a = annotations[i]
        cx, cy = a.box.center()
        obj[0, gy, gx] = 1.0
        cells.append((gy, gx))
        classes.append(a.class_id)
        deltas.append(
            (
                cx / stride - gx,
                cy / stride - gy,
                np.log(a.box.width / (wg * stride)),
                np.log(a.box.height / (hg * stride)),
            )
        )
    return TargetMap(
        objectness=obj,
        cells=np.asarray(cells, dtype=np.intp).reshape(-1, 2),
        classes=np.asarray(classes, dtype=np.intp),
        deltas=np.asarray(deltas, dtype=np.float32).reshape(-1, 4),
    )


def detection_loss(preds: DensePredictions, targets: TargetMap) -> DetectionLoss:
    """Objectness BCE over all cells plus class CE and smooth-L1 box loss
    averaged over positive cells; images without positives keep only the
    objectness term (the others are exactly zero)."""
    obj_loss = kernels.bce_with_logits(preds.objectness, targets.objectness)
    n_pos = len(targets.classes)
    if n_pos == 0:
        return DetectionLoss(total=obj_loss, objectness=float(obj_loss.data), classification=0.0, box=0.0)
    ys, xs = targets.cells[:, 0], targets.cells[:, 1]
    cls_rows = kernels.gather_pixels(preds.class_logits, ys, xs)
    cls_loss = kernels.softmax_ce_rows(cls_rows, targets.classes)
    box_rows = kernels.gather_pixels(preds.box_deltas, ys, xs)
    box_targets = _encode_box_rows(targets.deltas)
    box_loss = kernels.smooth_l1(box_rows, Tensor(box_targets))
    total = obj_loss + cls_loss + box_loss
    return DetectionLoss(
        total=total,
        objectness=float(obj_loss.data),
        classification=float(cls_loss.data),
        box=float(box_loss.data),
    )


def _encode_box_rows(deltas: np.ndarray) -> np.ndarray:
    """Raw-prediction-space targets: logit of the cell offset, log sizes."""
    eps = 1e-4
    frac = np.clip(deltas[:, :2], eps, 1.0 - eps)
    tx_ty = np.log(frac / (1.0 - frac))
    return np.concatenate([tx_ty, deltas[:, 2:]], axis=1).astype(np.float32)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def decode(
    preds: DensePredictions,
    image_w: int,
    image_h: int,
    score_thresh: float = 0.05,
    stride: int = STRIDE,
) -> list[Detection]:
    """Invert the box parameterization; score = P(object) * P(class|object)."""
    obj = _sigmoid(preds.objectness.data[0].astype(np.float64))
    z = preds.class_logits.data.astype(np.float64)
    z = z - z.max(axis=0, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=0, keepdims=True)
    best_cls = probs.argmax(axis=0)
    hg, wg = obj.shape
    best_p = probs[best_cls, np.arange(hg)[:, None], np.arange(wg)[None, :]]
    scores = obj * best_p
    bd = preds.box_deltas.data.astype(np.float64)
    cx = (np.arange(wg)[None, :] + _sigmoid(bd[0])) * stride
    cy = (np.arange(hg)[:, None] + _sigmoid(bd[1])) * stride
    bw = np.exp(np.clip(bd[2], -8.0, 8.0)) * (wg * stride)
    bh = np.exp(np.clip(bd[3], -8.0, 8.0)) * (hg * stride)
    dets: list[Detection] = []
    for gy, gx in zip(*np.nonzero(scores >= score_thresh)):
        x0 = max(cx[gy, gx] - bw[gy, gx] / 2, 0.0)
        y0 = max(cy[gy, gx] - bh[gy, gx] / 2, 0.0)
        x1 = min(cx[gy, gx] + bw[gy, gx] / 2, float(image_w))
        y1 = min(cy[gy, gx] + bh[gy, gx] / 2, float(image_h))
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        dets.append(
            Detection(class_id=int(best_cls[gy, gx]), score=float(scores[gy, gx]), box=RoiBox(x0, y0, x1, y1))
        )
    return dets


def nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression of overlaps with IoU above the threshold."""
    kept: list[Detection] = []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for i in order:
        d = dets[i]
        if any(k.class_id == d.class_id and _box_iou(k.box, d.box) > iou_thresh for k in kept):
            continue
        kept.append(d)
    return kept


def _box_iou(a: RoiBox, b: RoiBox) -> float:
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)
