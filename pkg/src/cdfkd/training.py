"""Run orchestration: dataset build, teacher pretraining, distillation,
and the ablation grid.

Phases are deterministic functions of the resolved configuration: one RNG
stream (derived from the config seed) drives batch order and per-sample
diversification draws, so re-running any phase from its config dump
reproduces logs, checkpoints, and reports bit for bit. The teacher's
feature maps over the (fixed) clean training images are cached after first
use during distillation; the teacher is frozen, so this changes nothing
but wall-clock time.
"""

from __future__ import annotations

import os

import numpy as np

from .config import RunConfig, dump_config
from .detector import DetectorModel, assign_targets, detection_loss
from .distill import (
    DistillBatch,
    DistillConfig,
    distill_step,
    diversify_sample,
    loss_csv_header,
    loss_csv_line,
)
from .evaluation import EvalReport, ap_by_size, evaluate_domains
from .kernels import FeatureMap
from .scenes import (
    SceneConfig,
    VARIANTS,
    generate_scenes,
    read_dataset,
    read_manifest,
    render_domain_variant,
    write_dataset,
)
from .tensor import Tape, mean_scalars, sgd_step

__all__ = [
    "build_datasets",
    "train_teacher",
    "run_distillation",
    "run_ablation",
    "ABLATION_ROWS",
    "BALANCE_GRID",
]

_SHUFFLE_SALT = 0x9E37_79B9
_DIVERSIFY_SALT = 0x7F4A_7C15


def build_datasets(cfg: RunConfig) -> None:
    """Generate train/test scenes and write one directory per domain.

    Targets are the held-out test scenes re-rendered by each fixed recipe,
    so every domain shares the same underlying layouts.
    """
    scene_cfg = SceneConfig(size=cfg.image_size)
    train = generate_scenes(cfg.seed, cfg.train_scenes, scene_cfg)
    test_seed = cfg.seed + 1
    test = generate_scenes(test_seed, cfg.test_scenes, scene_cfg)
    write_dataset(train, os.path.join(cfg.data_dir, "source-train"), seed=cfg.seed)
    for name, variant in VARIANTS.items():
        rendered = [render_domain_variant(s, variant) for s in test]
        write_dataset(rendered, os.path.join(cfg.data_dir, name), seed=test_seed)


def _require_split(cfg: RunConfig, name: str):
    path = os.path.join(cfg.data_dir, name)
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset split '{name}' not found under '{cfg.data_dir}' (run gen-data first)")
    return read_dataset(path), read_manifest(path)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train_teacher(cfg: RunConfig, out_dir: str | None = None) -> str:
    """Pretrain the teacher on clean source scenes with the detection loss
    only; writes checkpoint, per-step loss log, and the resolved config."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    scenes, manifest = _require_split(cfg, "source-train")
    model = DetectorModel(num_classes=len(manifest["classes"]), seed=cfg.seed, role="teacher")
    rng = np.random.Generator(np.random.PCG64(cfg.seed ^ _SHUFFLE_SALT))
    dump_config(cfg, os.path.join(out_dir, "teacher-config.txt"))
    log_path = os.path.join(out_dir, "teacher-loss.csv")
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step,l_det\n")
        for _epoch in range(cfg.teacher_epochs):
            for batch_idx in _batches(len(scenes), cfg.batch_size, rng):
                with Tape() as tape:
                    tensors = model.tensors()
                    terms = []
                    for i in batch_idx:
                        scene = scenes[i]
                        fm, preds = model.forward(scene.image, tensors)
                        hg, wg = fm.tensor.shape[1:]
                        targets = assign_targets(scene.annotations, (hg, wg), fm.stride)
                        terms.append(detection_loss(preds, targets).total)
                    loss = mean_scalars(terms)
                    grads = tape.backward(loss)
                by_name = {name: grads[t.node] for name, t in tensors.items() if t.node is not None}
                sgd_step(model.params, by_name, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
                log.write(f"{step},{float(loss.data)!r}\n")
                step += 1
    ckpt = os.path.join(out_dir, "teacher.ckpt")
    model.save(ckpt)
    return ckpt


def _distill_config(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(
        alpha=cfg.alpha if cfg.l_global else 0.0,
        beta=cfg.beta if cfg.l_instance else 0.0,
        roi_out=cfg.roi_out,
        roi_samples=cfg.roi_samples,
        min_feature_box=cfg.min_feature_box,
    )


def run_distillation(cfg: RunConfig, teacher_ckpt: str, out_dir: str | None = None) -> tuple[str, EvalReport]:
    """Distill a student (initialized from the teacher weights) over
    diversified batches; writes student checkpoint, per-step loss CSV, the
    resolved config, and the final evaluation report."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    scenes, manifest = _require_split(cfg, "source-train")
    k = len(manifest["classes"])
    teacher = DetectorModel(num_classes=k, seed=cfg.seed, role="teacher")
    teacher.load(teacher_ckpt)
    teacher.freeze()
    student = DetectorModel(num_classes=k, seed=cfg.seed, role="student")
    student.load(teacher_ckpt)

    dcfg = _distill_config(cfg)
    use_feats = dcfg.alpha > 0 or dcfg.beta > 0
    feature_cache: dict[int, FeatureMap] = {}
    rng = np.random.Generator(np.random.PCG64(cfg.seed ^ _DIVERSIFY_SALT))
    dump_config(cfg, os.path.join(out_dir, "distill-config.txt"))
    log_path = os.path.join(out_dir, "distill-loss.csv")
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(loss_csv_header() + "\n")
        for _epoch in range(cfg.distill_epochs):
            for batch_idx in _batches(len(scenes), cfg.batch_size, rng):
                samples = [
                    diversify_sample(scenes[i], rng, corrupt=cfg.corrupt_down, rescale=cfg.downscale)
                    for i in batch_idx
                ]
                maps = None
                if use_feats:
                    for i in batch_idx:
                        if i not in feature_cache:
                            feature_cache[i] = teacher.forward_backbone(scenes[i].image)
                    maps = [feature_cache[i] for i in batch_idx]
                breakdown = distill_step(
                    teacher,
                    student,
                    DistillBatch(samples, teacher_maps=maps),
                    dcfg,
                    lr=cfg.lr,
                    momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay,
                )
                log.write(loss_csv_line(step, breakdown, cfg.lr) + "\n")
                step += 1
    ckpt = os.path.join(out_dir, "student.ckpt")
    student.save(ckpt)
    report = evaluate_domains(student, cfg.data_dir, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
    with open(os.path.join(out_dir, "eval-report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    return ckpt, report


# name -> (corrupt_down, l_global, l_instance)
ABLATION_ROWS = (
    ("baseline", (False, False, False)),
    ("corrupt-down", (True, False, False)),
    ("corrupt-down+global", (True, True, False)),
    ("corrupt-down+instance", (True, False, True)),
    ("full", (True, True, True)),
)

BALANCE_GRID = ((0.5, 1.5), (1.0, 1.0), (1.5, 0.5))


def _eval_targets_by_size(cfg: RunConfig, ckpt: str, num_classes: int) -> dict[str, float]:
    model = DetectorModel(num_classes=num_classes, seed=cfg.seed)
    model.load(ckpt)
    pooled = []
    for domain in ("target-dark", "target-hazy", "target-dark-streaks", "target-lowres-noisy"):
        pooled.extend(read_dataset(os.path.join(cfg.data_dir, domain)))
    manifest = read_manifest(os.path.join(cfg.data_dir, "target-dark"))
    return ap_by_size(model, pooled, manifest["classes"], cfg.score_thresh, cfg.nms_iou)


def run_ablation(cfg: RunConfig, teacher_ckpt: str | None = None) -> dict:
    """Component rows, the alpha/beta balance grid, and the scale section
    (corruption-only vs corruption+downscale, per-size AP), all sharing one
    teacher checkpoint and dataset."""
    from dataclasses import replace

    os.makedirs(cfg.out_dir, exist_ok=True)
    if teacher_ckpt is None:
        teacher_ckpt = train_teacher(cfg, out_dir=os.path.join(cfg.out_dir, "teacher"))
    manifest = read_manifest(os.path.join(cfg.data_dir, "source-train"))
    k = len(manifest["classes"])

    results: dict = {"rows": {}, "balance": {}, "scale": {}}

    def distill_into(name: str, row_cfg: RunConfig) -> tuple[str, EvalReport]:
        row_dir = os.path.join(cfg.out_dir, name)
        return run_distillation(row_cfg, teacher_ckpt, out_dir=row_dir)

    row_ckpts: dict[str, str] = {}
    for name, (cd, lglo, lins) in ABLATION_ROWS:
        if name == "baseline":
            # the source-only detector itself, no further training
            model = DetectorModel(num_classes=k, seed=cfg.seed)
            model.load(teacher_ckpt)
            report = evaluate_domains(model, cfg.data_dir, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
            row_ckpts[name] = teacher_ckpt
        else:
            row_cfg = replace(cfg, corrupt_down=cd, l_global=lglo, l_instance=lins)
            ckpt, report = distill_into(name, row_cfg)
            row_ckpts[name] = ckpt
        results["rows"][name] = {
            "flags": {"corrupt_down": cd, "l_global": lglo, "l_instance": lins},
            "domains": {d: r["map"] for d, r in report.domains.items()},
            "target_average": report.target_average,
        }

    for alpha, beta in BALANCE_GRID:
        key = f"alpha={alpha}/beta={beta}"
        if (alpha, beta) == (1.0, 1.0):
            results["balance"][key] = dict(results["rows"]["full"], reused="full")
            continue
        row_cfg = replace(cfg, corrupt_down=True, l_global=True, l_instance=True, alpha=alpha, beta=beta)
        _, report = distill_into(f"balance-a{alpha}-b{beta}", row_cfg)
        results["balance"][key] = {
            "domains": {d: r["map"] for d, r in report.domains.items()},
            "target_average": report.target_average,
        }

    corrupt_only_cfg = replace(cfg, corrupt_down=True, downscale=False, l_global=False, l_instance=False)
    corrupt_only_ckpt, _ = distill_into("corrupt-only", corrupt_only_cfg)
    results["scale"]["corrupt-only"] = _eval_targets_by_size(cfg, corrupt_only_ckpt, k)
    results["scale"]["corrupt-down"] = _eval_targets_by_size(cfg, row_ckpts["corrupt-down"], k)
    return results


def format_ablation_markdown(results: dict) -> str:
    lines = ["## Component ablation", "", "| configuration | C&D | L_glo | L_ins | target avg mAP |", "|---|---|---|---|---|"]
    for name, row in results["rows"].items():
        f = row["flags"]
        mark = lambda b: "yes" if b else "-"
        lines.append(
            f"| {name} | {mark(f['corrupt_down'])} | {mark(f['l_global'])} | {mark(f['l_instance'])} "
            f"| {row['target_average'] * 100:.1f} |"
        )
    lines += ["", "## Loss balance", "", "| alpha/beta | target avg mAP |", "|---|---|"]
    for key, row in results["balance"].items():
        lines.append(f"| {key} | {row['target_average'] * 100:.1f} |")
    lines += ["", "## Scale (per-size AP on targets)", "", "| data mode | small | medium | large |", "|---|---|---|---|"]
    for key, buckets in results["scale"].items():
        lines.append(
            f"| {key} | {buckets['small'] * 100:.1f} | {buckets['medium'] * 100:.1f} | {buckets['large'] * 100:.1f} |"
        )
    return "\n".join(lines) + "\n"
