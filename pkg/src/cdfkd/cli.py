"""Command-line surface: dataset generation, the two training phases,
evaluation, the ablation grid, and the two inspection commands.

Every subcommand exits 0 on success and 2 with a one-line `error: ...` on
stderr otherwise. Artifacts land under the directory given by --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .corruption import CORRUPTION_KINDS, apply_corruption
from .detector import DetectorModel
from .evaluation import evaluate_domains, export_feature_heatmap
from .imgio import read_ppm, write_ppm
from .scenes import read_manifest
from .training import build_datasets, format_ablation_markdown, run_ablation, run_distillation, train_teacher


def _base_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    overrides = []
    for item in getattr(args, "set", None) or []:
        overrides.append(item)
    if overrides:
        cfg = parse_config("\n".join(overrides), source="--set", base=cfg)
    if getattr(args, "data", None):
        cfg = replace(cfg, data_dir=args.data)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg.validate()


def _cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    cfg = replace(cfg, data_dir=args.out or cfg.data_dir)
    build_datasets(cfg)
    dump_config(cfg, os.path.join(cfg.data_dir, "gen-data-config.txt"))
    print(f"wrote datasets under {cfg.data_dir}")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _base_config(args)
    ckpt = train_teacher(cfg)
    print(f"teacher checkpoint: {ckpt}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _base_config(args)
    ckpt, report = run_distillation(cfg, args.teacher)
    print(f"student checkpoint: {ckpt}")
    print(report.markdown())
    return 0


def _cmd_eval(args) -> int:
    cfg = _base_config(args)
    manifest = read_manifest(os.path.join(cfg.data_dir, "source-clean"))
    model = DetectorModel(num_classes=len(manifest["classes"]), seed=cfg.seed)
    model.load(args.checkpoint)
    report = evaluate_domains(model, cfg.data_dir, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "eval-report.json")
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    print(report.markdown())
    print(f"report: {out_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _base_config(args)
    results = run_ablation(cfg, teacher_ckpt=args.teacher)
    os.makedirs(cfg.out_dir, exist_ok=True)
    json_path = os.path.join(cfg.out_dir, "ablation.json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    md = format_ablation_markdown(results)
    md_path = os.path.join(cfg.out_dir, "ablation.md")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(md)
    print(md)
    print(f"reports: {json_path}, {md_path}")
    return 0


def _cmd_corrupt_preview(args) -> int:
    img = read_ppm(args.image)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    out = apply_corruption(img, args.kind, args.severity, rng)
    write_ppm(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _cmd_heatmap(args) -> int:
    img = read_ppm(args.image)
    # The checkpoint manifest fixes the class count; probe it cheaply.
    from .checkpoint import load_checkpoint

    arrays = load_checkpoint(args.checkpoint)
    if "head.cls.bias" not in arrays:
        raise ValueError("checkpoint has no detector head (head.cls.bias missing)")
    model = DetectorModel(num_classes=arrays["head.cls.bias"].shape[0])
    model.load(args.checkpoint)
    export_feature_heatmap(model, img, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdfkd", description="Cross-domain feature distillation for detection, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True, config=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        if data:
            p.add_argument("--data", help="dataset root directory")
        if out:
            p.add_argument("--out", help="output directory for artifacts")

    p = sub.add_parser("gen-data", help="generate the multi-domain synthetic benchmark")
    common(p, data=False)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-teacher", help="pretrain the teacher on clean source data")
    common(p)
    p.set_defaults(fn=_cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.set_defaults(fn=_cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint over all domains")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the component/balance/scale ablation grid")
    common(p)
    p.add_argument("--teacher", help="reuse an existing teacher checkpoint")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("corrupt-preview", help="apply one corruption to an image")
    p.add_argument("--image", required=True, help="input PPM (P6)")
    p.add_argument("--kind", required=True, choices=CORRUPTION_KINDS)
    p.add_argument("--severity", required=True, type=int, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(fn=_cmd_corrupt_preview)

    p = sub.add_parser("heatmap", help="export a backbone activation heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM (P6)")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(fn=_cmd_heatmap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
