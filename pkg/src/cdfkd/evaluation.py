"""Detection quality measurement: per-class AP@0.5, per-domain mAP with a
four-target average, per-size AP buckets, and backbone heatmap export.

AP uses all-point (precision-envelope) interpolation over the greedy
score-ordered matching. Ties in score are broken by detection content
(image id, then box coordinates), which makes the result invariant to any
score-preserving permutation of the input list. Ground truths can carry an
ignore flag (used by the size buckets): matching an ignored truth costs
nothing and scores nothing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .detector import Detection, DetectorModel, decode, nms
from .imgio import resize_bilinear, to_uint8, write_pgm
from .kernels import RoiBox
from .scenes import Scene, read_dataset, read_manifest

__all__ = [
    "TARGET_DOMAINS",
    "EvalReport",
    "iou",
    "average_precision",
    "evaluate_scenes",
    "evaluate_domains",
    "ap_by_size",
    "export_feature_heatmap",
]

TARGET_DOMAINS = ("target-dark", "target-hazy", "target-dark-streaks", "target-lowres-noisy")
EVAL_DOMAINS = ("source-clean",) + TARGET_DOMAINS


def iou(a: RoiBox, b: RoiBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _normalize_truths(truths) -> list[tuple[int, RoiBox, bool]]:
    out = []
    for t in truths:
        if len(t) == 2:
            img_id, box = t
            out.append((img_id, box, False))
        else:
            img_id, box, ignore = t
            out.append((img_id, box, bool(ignore)))
    return out


def _sorted_detections(detections) -> list[tuple[int, float, RoiBox]]:
    return sorted(
        detections,
        key=lambda d: (-d[1], d[0], d[2].x0, d[2].y0, d[2].x1, d[2].y1),
    )


def _match(detections, truths, iou_thresh: float):
    """Greedy matching in score order against the highest-IoU free truth.

    Returns per-detection flags: 1 = true positive, 0 = false positive,
    -1 = matched an ignored truth (dropped from the curve).
    """
    by_image: dict[int, list[tuple[RoiBox, bool]]] = {}
    for img_id, box, ignore in truths:
        by_image.setdefault(img_id, []).append((box, ignore))
    used: dict[int, list[bool]] = {k: [False] * len(v) for k, v in by_image.items()}
    flags = []
    for img_id, _score, box in detections:
        candidates = by_image.get(img_id, [])
        best_j, best_iou = -1, iou_thresh
        for j, (gt_box, _ign) in enumerate(candidates):
            if used[img_id][j]:
                continue
            v = iou(box, gt_box)
            if v > best_iou or (v == best_iou and best_j == -1 and v >= iou_thresh):
                best_j, best_iou = j, v
        if best_j == -1:
            flags.append(0)
            continue
        used[img_id][best_j] = True
        flags.append(-1 if candidates[best_j][1] else 1)
    return flags


def average_precision(detections, truths, iou_thresh: float = 0.5) -> float:
    """AP@`iou_thresh` for one class.

    `detections`: iterable of (image_id, score, RoiBox).
    `truths`: iterable of (image_id, RoiBox) or (image_id, RoiBox, ignore).
    Returns 0.0 when there are no non-ignored truths.
    """
    truths = _normalize_truths(truths)
    npos = sum(1 for _, _, ign in truths if not ign)
    if npos == 0:
        return 0.0
    dets = _sorted_detections(detections)
    flags = [f for f in _match(dets, truths, iou_thresh) if f != -1]
    if not flags:
        return 0.0
    tp = np.cumsum([f == 1 for f in flags], dtype=np.float64)
    fp = np.cumsum([f == 0 for f in flags], dtype=np.float64)
    recall = tp / npos
    precision = tp / (tp + fp)
    # Precision envelope, then sum rectangle areas between recall steps.
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    class_names: list[str]
    domains: dict[str, dict] = field(default_factory=dict)
    target_average: float = 0.0

    def to_json(self) -> str:
        payload = {
            "class_names": list(self.class_names),
            "domains": self.domains,
            "target_average": self.target_average,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        return cls(
            class_names=list(payload["class_names"]),
            domains=payload["domains"],
            target_average=payload["target_average"],
        )

    def markdown(self) -> str:
        lines = []
        header = "| domain | " + " | ".join(self.class_names) + " | mAP |"
        rule = "|" + "---|" * (len(self.class_names) + 2)
        lines.append(header)
        lines.append(rule)
        for name, res in self.domains.items():
            cells = [
                f"{res['ap'].get(c, float('nan')) * 100:.1f}" if c in res["ap"] else "-"
                for c in self.class_names
            ]
            lines.append(f"| {name} | " + " | ".join(cells) + f" | **{res['map'] * 100:.1f}** |")
        lines.append("")
        lines.append(f"target-average mAP: **{self.target_average * 100:.1f}**")
        return "\n".join(lines)


def _detect_scene(model: DetectorModel, scene: Scene, score_thresh: float, nms_iou: float) -> list[Detection]:
    h, w = scene.image.shape[:2]
    _, preds = model.forward(scene.image)
    return nms(decode(preds, w, h, score_thresh=score_thresh), iou_thresh=nms_iou)


def evaluate_scenes(
    model: DetectorModel,
    scenes: list[Scene],
    class_names,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> dict:
    """Per-class AP and mAP over one scene list, plus TP/FP/FN diagnostics
    counted at score >= 0.5. Classes without ground truth are excluded."""
    num_classes = len(class_names)
    dets_per_class: list[list[tuple[int, float, RoiBox]]] = [[] for _ in range(num_classes)]
    gts_per_class: list[list[tuple[int, RoiBox]]] = [[] for _ in range(num_classes)]
    for img_id, scene in enumerate(scenes):
        for det in _detect_scene(model, scene, score_thresh, nms_iou):
            dets_per_class[det.class_id].append((img_id, det.score, det.box))
        for a in scene.annotations:
            gts_per_class[a.class_id].append((img_id, a.box))
    ap: dict[str, float] = {}
    tp = fp = fn = 0
    for cls in range(num_classes):
        if not gts_per_class[cls]:
            continue
        ap[class_names[cls]] = average_precision(dets_per_class[cls], gts_per_class[cls])
        confident = [d for d in dets_per_class[cls] if d[1] >= 0.5]
        flags = _match(_sorted_detections(confident), _normalize_truths(gts_per_class[cls]), 0.5)
        cls_tp = sum(1 for f in flags if f == 1)
        tp += cls_tp
        fp += sum(1 for f in flags if f == 0)
        fn += len(gts_per_class[cls]) - cls_tp
    mean_ap = float(sum(ap.values()) / len(ap)) if ap else 0.0
    return {"ap": ap, "map": mean_ap, "tp": tp, "fp": fp, "fn": fn}


def evaluate_domains(
    model: DetectorModel,
    data_root: str,
    domains=EVAL_DOMAINS,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> EvalReport:
    """Run decode+NMS over every domain directory under `data_root`."""
    missing = [d for d in domains if not os.path.isdir(os.path.join(data_root, d))]
    if missing:
        raise FileNotFoundError(f"missing variant data: {', '.join(missing)}")
    class_names = None
    report = EvalReport(class_names=[])
    target_maps = []
    for domain in domains:
        path = os.path.join(data_root, domain)
        manifest = read_manifest(path)
        if class_names is None:
            class_names = list(manifest["classes"])
            report.class_names = class_names
        scenes = read_dataset(path)
        result = evaluate_scenes(model, scenes, class_names, score_thresh, nms_iou)
        report.domains[domain] = result
        if domain.startswith("target-"):
            target_maps.append(result["map"])
    if target_maps:
        report.target_average = float(sum(target_maps) / len(target_maps))
    return report


def ap_by_size(
    model: DetectorModel,
    scenes: list[Scene],
    class_names,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> dict[str, float]:
    """mAP per GT-area tercile (small/medium/large).

    Truths outside the active bucket are ignored rather than deleted:
    detections landing on them are dropped from the curve instead of being
    counted as false positives."""
    areas = [a.box.area for s in scenes for a in s.annotations]
    if not areas:
        raise ValueError("no ground truth boxes to bucket by size")
    lo, hi = np.quantile(np.asarray(areas, dtype=np.float64), [1 / 3, 2 / 3])
    num_classes = len(class_names)
    dets_per_class: list[list] = [[] for _ in range(num_classes)]
    gts_per_class: list[list] = [[] for _ in range(num_classes)]
    for img_id, scene in enumerate(scenes):
        for det in _detect_scene(model, scene, score_thresh, nms_iou):
            dets_per_class[det.class_id].append((img_id, det.score, det.box))
        for a in scene.annotations:
            gts_per_class[a.class_id].append((img_id, a.box))

    def bucket_of(area: float) -> str:
        if area <= lo:
            return "small"
        if area <= hi:
            return "medium"
        return "large"

    out: dict[str, float] = {}
    for bucket in ("small", "medium", "large"):
        aps = []
        for cls in range(num_classes):
            truths = [
                (img_id, box, bucket_of(box.area) != bucket)
                for img_id, box in gts_per_class[cls]
            ]
            if all(ign for _, _, ign in truths) or not truths:
                continue
            aps.append(average_precision(dets_per_class[cls], truths))
        out[bucket] = float(sum(aps) / len(aps)) if aps else 0.0
    return out


def export_feature_heatmap(model: DetectorModel, img: np.ndarray, out_path: str) -> np.ndarray:
    """Channel-mean absolute backbone activation, min-max normalized and
    resized to the image extents, written as P5 grayscale. A constant
    activation map renders mid-gray."""
    fm = model.forward_backbone(img)
    act = np.abs(fm.tensor.data).mean(axis=0)
    lo, hi = float(act.min()), float(act.max())
    if hi > lo:
        act = (act - lo) / (hi - lo)
    else:
        act = np.full_like(act, 0.5)
    heat = resize_bilinear(act.astype(np.float32), img.shape[0], img.shape[1])
    write_pgm(out_path, to_uint8(heat))
    return heat


def heatmap_box_mass(heat: np.ndarray, annotations) -> float:
    """Mean heat value inside ground-truth boxes (Fig.-style diagnostics)."""
    h, w = heat.shape
    mask = np.zeros((h, w), dtype=bool)
    for a in annotations:
        x0, y0 = int(max(a.box.x0, 0)), int(max(a.box.y0, 0))
        x1, y1 = int(min(math.ceil(a.box.x1), w)), int(min(math.ceil(a.box.y1), h))
        mask[y0:y1, x0:x1] = True
    if not mask.any():
        return 0.0
    return float(heat[mask].mean())
