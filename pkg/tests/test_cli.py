"""End-to-end CLI runs at miniature scale, plus error-path behavior.

Every invocation goes through cli.main(argv) in-process; the pipeline
fixture chains gen-data -> train-teacher -> distill -> eval once per module
and individual tests assert on its artifacts.
"""

import json
import os

import numpy as np
import pytest

from cdfkd.cli import main
from cdfkd.evaluation import EvalReport
from cdfkd.imgio import read_ppm

TINY = [
    "--set", "seed=5",
    "--set", "train_scenes=8",
    "--set", "test_scenes=4",
    "--set", "teacher_epochs=1",
    "--set", "distill_epochs=1",
]

DOMAINS = ("source-clean", "target-dark", "target-hazy", "target-dark-streaks", "target-lowres-noisy")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    teacher_dir = str(root / "teacher")
    distill_dir = str(root / "distill")

    assert main(["gen-data", "--out", data, *TINY]) == 0
    assert main(["train-teacher", "--data", data, "--out", teacher_dir, *TINY]) == 0
    teacher = os.path.join(teacher_dir, "teacher.ckpt")
    assert main(["distill", "--teacher", teacher, "--data", data, "--out", distill_dir, *TINY]) == 0
    return {
        "root": root,
        "data": data,
        "teacher": teacher,
        "teacher_dir": teacher_dir,
        "distill_dir": distill_dir,
        "student": os.path.join(distill_dir, "student.ckpt"),
        "sample_ppm": os.path.join(data, "source-train", "images", "000000.ppm"),
    }


def test_gen_data_writes_every_domain(pipeline):
    entries = set(os.listdir(pipeline["data"]))
    assert {"source-train", *DOMAINS} <= entries
    assert "gen-data-config.txt" in entries
    for d in DOMAINS:
        assert os.path.isfile(os.path.join(pipeline["data"], d, "manifest.json"))


def test_teacher_artifacts(pipeline):
    d = pipeline["teacher_dir"]
    assert os.path.isfile(pipeline["teacher"])
    assert os.path.isfile(os.path.join(d, "teacher-config.txt"))
    lines = open(os.path.join(d, "teacher-loss.csv")).read().splitlines()
    assert lines[0] == "step,l_det"
    assert len(lines) == 3  # 8 scenes / batch 4 x 1 epoch, plus header


def test_distill_artifacts(pipeline):
    d = pipeline["distill_dir"]
    assert os.path.isfile(pipeline["student"])
    assert os.path.isfile(os.path.join(d, "distill-config.txt"))
    lines = open(os.path.join(d, "distill-loss.csv")).read().splitlines()
    assert lines[0].startswith("step,l_det,l_global,l_instance,l_total")
    assert len(lines) == 3
    report = EvalReport.from_json(open(os.path.join(d, "eval-report.json")).read())
    assert set(report.domains) == set(DOMAINS)


def test_eval_command_writes_report(pipeline, capsys):
    out = str(pipeline["root"] / "eval")
    rc = main(["eval", "--checkpoint", pipeline["student"], "--data", pipeline["data"], "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "| domain |" in stdout
    assert "target-average mAP" in stdout
    report = EvalReport.from_json(open(os.path.join(out, "eval-report.json")).read())
    assert report.target_average >= 0.0


def test_heatmap_command(pipeline):
    out = str(pipeline["root"] / "heat.pgm")
    rc = main(["heatmap", "--checkpoint", pipeline["teacher"], "--image", pipeline["sample_ppm"], "--out", out])
    assert rc == 0
    assert open(out, "rb").read(2) == b"P5"


def test_corrupt_preview_command(pipeline):
    out = str(pipeline["root"] / "corrupted.ppm")
    rc = main([
        "corrupt-preview", "--image", pipeline["sample_ppm"],
        "--kind", "gaussian-noise", "--severity", "3", "--seed", "11", "--out", out,
    ])
    assert rc == 0
    assert not np.array_equal(read_ppm(out), read_ppm(pipeline["sample_ppm"]))


def test_gen_data_is_reproducible(pipeline, tmp_path):
    again = str(tmp_path / "data2")
    assert main(["gen-data", "--out", again, *TINY]) == 0
    for d in ("source-train", "target-dark"):
        a = open(os.path.join(pipeline["data"], d, "annotations.jsonl"), "rb").read()
        b = open(os.path.join(again, d, "annotations.jsonl"), "rb").read()
        assert a == b


def test_config_file_and_set_overrides(pipeline, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("seed = 5\ntrain_scenes = 8\ntest_scenes = 4\nteacher_epochs = 1\n")
    out = str(tmp_path / "t2")
    rc = main([
        "train-teacher", "--config", str(cfg_path), "--data", pipeline["data"], "--out", out,
        "--set", "teacher_epochs=0",
    ])
    assert rc == 0
    # epochs=0: checkpoint equals initialization; the loss log is header-only
    assert open(os.path.join(out, "teacher-loss.csv")).read() == "step,l_det\n"


# ---------------------------------------------------------------------------
# failure paths: exit code 2 and a one-line error on stderr


def _expect_error(capsys, argv, needle=""):
    rc = main(argv)
    captured = capsys.readouterr()
    assert rc == 2
    assert captured.err.startswith("error: ")
    assert captured.err.count("\n") == 1
    if needle:
        assert needle in captured.err


def test_missing_dataset_is_reported(tmp_path, capsys):
    _expect_error(
        capsys,
        ["train-teacher", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), *TINY],
        "source-train",
    )


def test_missing_checkpoint_is_reported(pipeline, tmp_path, capsys):
    _expect_error(
        capsys,
        ["eval", "--checkpoint", str(tmp_path / "ghost.ckpt"), "--data", pipeline["data"], "--out", str(tmp_path / "o")],
    )


def test_bad_set_override_is_reported(tmp_path, capsys):
    _expect_error(
        capsys,
        ["gen-data", "--out", str(tmp_path / "d"), "--set", "train_scenes=banana"],
        "train_scenes",
    )


def test_unknown_config_key_is_reported(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_knob = 1\n")
    _expect_error(
        capsys,
        ["train-teacher", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")],
        "unknown key",
    )


def test_invalid_kind_is_an_argparse_error(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([
            "corrupt-preview", "--image", pipeline["sample_ppm"],
            "--kind", "vaporwave", "--severity", "3", "--out", str(tmp_path / "x.ppm"),
        ])
    assert exc.value.code == 2


def test_corrupted_checkpoint_is_reported(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    _expect_error(
        capsys,
        ["heatmap", "--checkpoint", str(bad), "--image", pipeline["sample_ppm"], "--out", str(tmp_path / "h.pgm")],
    )
