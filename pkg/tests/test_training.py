"""Training orchestration: dataset builds, determinism, resolved-config
reproducibility, and the ablation grid structure (all at miniature scale)."""

import json
import os
from dataclasses import replace

import pytest

from cdfkd.checkpoint import checkpoint_digest, load_checkpoint
from cdfkd.config import RunConfig, load_config
from cdfkd.detector import DetectorModel
from cdfkd.scenes import read_dataset, read_manifest
from cdfkd.training import (
    ABLATION_ROWS,
    BALANCE_GRID,
    build_datasets,
    run_ablation,
    run_distillation,
    train_teacher,
)


def tiny_cfg(tmp, **kw) -> RunConfig:
    base = dict(
        seed=5,
        data_dir=os.path.join(tmp, "data"),
        out_dir=os.path.join(tmp, "run"),
        train_scenes=8,
        test_scenes=4,
        teacher_epochs=1,
        distill_epochs=1,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = str(tmp_path_factory.mktemp("train"))
    cfg = tiny_cfg(tmp)
    build_datasets(cfg)
    teacher = train_teacher(cfg, out_dir=os.path.join(tmp, "teacher"))
    return {"tmp": tmp, "cfg": cfg, "teacher": teacher}


def test_datasets_share_heldout_layouts(workspace):
    cfg = workspace["cfg"]
    train = read_manifest(os.path.join(cfg.data_dir, "source-train"))
    assert train["seed"] == cfg.seed
    assert train["count"] == cfg.train_scenes
    clean = read_dataset(os.path.join(cfg.data_dir, "source-clean"))
    dark = read_dataset(os.path.join(cfg.data_dir, "target-dark"))
    assert [s.scene_seed for s in clean] == [s.scene_seed for s in dark]
    assert all(
        read_manifest(os.path.join(cfg.data_dir, d))["seed"] == cfg.seed + 1
        for d in ("source-clean", "target-dark", "target-hazy", "target-dark-streaks", "target-lowres-noisy")
    )


def test_teacher_training_is_deterministic(workspace, tmp_path):
    cfg = workspace["cfg"]
    again = train_teacher(cfg, out_dir=str(tmp_path / "teacher2"))
    assert checkpoint_digest(again) == checkpoint_digest(workspace["teacher"])
    a = open(os.path.join(os.path.dirname(workspace["teacher"]), "teacher-loss.csv")).read()
    b = open(str(tmp_path / "teacher2" / "teacher-loss.csv")).read()
    assert a == b


def test_zero_epoch_teacher_equals_initialization(workspace, tmp_path):
    cfg = replace(workspace["cfg"], teacher_epochs=0)
    ckpt = train_teacher(cfg, out_dir=str(tmp_path / "t0"))
    arrays = load_checkpoint(ckpt)
    fresh = DetectorModel(num_classes=5, seed=cfg.seed, role="teacher")
    assert [p.name for p in fresh.params] == list(arrays)
    for p in fresh.params:
        assert (arrays[p.name] == p.value).all()


def test_distillation_rerun_from_resolved_dump_is_bit_identical(workspace, tmp_path):
    cfg = replace(workspace["cfg"], out_dir=str(tmp_path / "a"))
    run_distillation(cfg, workspace["teacher"])
    resolved = load_config(os.path.join(cfg.out_dir, "distill-config.txt"))
    rerun = replace(resolved, out_dir=str(tmp_path / "b"))
    run_distillation(rerun, workspace["teacher"])

    def artifact(d, name):
        return open(os.path.join(d, name), "rb").read()

    assert artifact(str(tmp_path / "a"), "distill-loss.csv") == artifact(str(tmp_path / "b"), "distill-loss.csv")
    assert artifact(str(tmp_path / "a"), "eval-report.json") == artifact(str(tmp_path / "b"), "eval-report.json")
    assert checkpoint_digest(os.path.join(str(tmp_path / "a"), "student.ckpt")) == checkpoint_digest(
        os.path.join(str(tmp_path / "b"), "student.ckpt")
    )


def test_distillation_never_touches_the_teacher_checkpoint(workspace, tmp_path):
    before = checkpoint_digest(workspace["teacher"])
    cfg = replace(workspace["cfg"], out_dir=str(tmp_path / "d"))
    run_distillation(cfg, workspace["teacher"])
    assert checkpoint_digest(workspace["teacher"]) == before


def test_missing_split_mentions_gen_data(workspace, tmp_path):
    cfg = replace(workspace["cfg"], data_dir=str(tmp_path / "void"))
    with pytest.raises(FileNotFoundError, match="gen-data"):
        train_teacher(cfg, out_dir=str(tmp_path / "o"))


def test_ablation_grid_structure(workspace, tmp_path):
    cfg = replace(workspace["cfg"], out_dir=str(tmp_path / "ablate"))
    results = run_ablation(cfg, teacher_ckpt=workspace["teacher"])
    assert list(results["rows"]) == [name for name, _ in ABLATION_ROWS]
    assert len(results["rows"]) == 5
    assert len(results["balance"]) == len(BALANCE_GRID) == 3
    assert results["balance"]["alpha=1.0/beta=1.0"].get("reused") == "full"
    assert set(results["scale"]) == {"corrupt-only", "corrupt-down"}
    for section in results["scale"].values():
        assert set(section) == {"small", "medium", "large"}
    for name, row in results["rows"].items():
        flags = row["flags"]
        assert set(flags) == {"corrupt_down", "l_global", "l_instance"}
        assert 0.0 <= row["target_average"] <= 1.0
    # every row shares the teacher and dataset; only flags differ
    full = json.dumps(results["rows"]["full"]["flags"])
    baseline = json.dumps(results["rows"]["baseline"]["flags"])
    assert full != baseline
    # the baseline row is the source-only detector scored as-is
    from cdfkd.evaluation import evaluate_domains

    model = DetectorModel(num_classes=5, seed=cfg.seed)
    model.load(workspace["teacher"])
    direct = evaluate_domains(model, cfg.data_dir, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
    assert results["rows"]["baseline"]["target_average"] == direct.target_average
