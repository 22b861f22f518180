import json
import shutil

import numpy as np
import pytest

from handprior.benchmark import (
    COLUMNS,
    MetricReport,
    MetricRow,
    emit_report,
    read_report,
    run_benchmark,
)
from handprior.cli import main
from handprior.errors import CheckpointPriorMismatch, ManifestMismatch, ValidationError
from handprior.geometry.primitives import icosphere
from handprior.model import ChordConfig, train_chord
from handprior.prior import anchor_codes


def _row(i, split="train", cd=1.0):
    return MetricRow(f"train_{i:04d}", "mug", split, "gt_pose", "fi", cd, cd * 10, 0.1 * i, 0.0, 0.5, 0, 0)


def test_report_csv_roundtrip_and_summary(tmp_path):
    rep = MetricReport([_row(0, cd=0.3), _row(1, cd=1.0 / 3), _row(2, "test_view", 2.5)])
    text = rep.to_csv()
    assert len(text.splitlines()) == 4 and text.splitlines()[0] == ",".join(COLUMNS)
    assert MetricReport.from_csv(text).rows == rep.rows
    paths = emit_report(rep, tmp_path)
    back = read_report(paths["csv"])
    assert back.rows == rep.rows
    summary = json.loads(paths["json"].read_text())
    train = [r for r in back.rows if r.split == "train"]
    assert abs(summary["train|gt_pose|fi"]["cd"] - np.mean([r.cd for r in train])) < 1e-12
    assert summary["train|gt_pose|fi"]["count"] == 2


def test_emit_empty_needs_allow(tmp_path):
    with pytest.raises(ValidationError):
        emit_report(MetricReport([]), tmp_path)
    paths = emit_report(MetricReport([]), tmp_path, allow_empty=True)
    assert paths["csv"].read_text() == ",".join(COLUMNS) + "\n"


def test_report_check_rejects_negative():
    with pytest.raises(ValidationError):
        MetricReport([_row(0, cd=-1.0)]).check()


@pytest.fixture(scope="module")
def tiny_model(mug_setup):
    _, prior, inputs = mug_setup
    return train_chord(inputs, prior, ChordConfig(steps=3, points_per_scene=32, log_every=0))


def test_benchmark_empty_and_mismatch(tmp_path, tiny_dataset, mug_setup, tiny_model):
    _, prior, _ = mug_setup
    rep = run_benchmark(tiny_dataset, "mug", {"fi,fa,fs,fp": tiny_model}, prior, splits=())
    assert len(rep) == 0 and rep.to_csv() == ",".join(COLUMNS) + "\n"
    with pytest.raises(CheckpointPriorMismatch):
        run_benchmark(tiny_dataset, "mug", {"x": tiny_model}, anchor_codes(icosphere(0.05), "mug"))
    broken = tmp_path / "data"
    shutil.copytree(tiny_dataset, broken)
    shutil.rmtree(broken / "mug" / "test_view_0000")
    with pytest.raises(ManifestMismatch):
        run_benchmark(broken, "mug", {"x": tiny_model}, prior, splits=("test_view",))
    with pytest.raises(ValidationError):
        run_benchmark(tiny_dataset, "mug", {"x": tiny_model}, prior, pose_modes=("est_pose",))


def test_benchmark_rows(tiny_dataset, mug_setup, tiny_model):
    _, prior, _ = mug_setup
    timing = {}
    rep = run_benchmark(tiny_dataset, "mug", {"fi,fa,fs,fp": tiny_model}, prior, splits=("test_instance",),
                        pose_modes=("gt_pose", "perturbed_pose"), timing=timing)
    assert len(rep) == 2 and len(timing) == 2
    gt, pert = [r for r in rep.rows if r.pose_mode == "gt_pose"], [r for r in rep.rows if r.pose_mode != "gt_pose"]
    assert gt[0].mpjpe_mm == 0.0 and pert[0].mpjpe_mm > 0.0
    for r in rep.rows:
        assert r.cd_mm2 == pytest.approx(10 * r.cd)


# ----------------------------------------------------------------------------
# command line


def _cli(*argv):
    return main([str(a) for a in argv])


def test_cli_pipeline_and_exit_codes(tmp_path, tiny_dataset, capsys):
    out = tmp_path / "run"
    common = ["--data-root", tiny_dataset, "--out", out, "--category", "mug"]
    assert _cli("build-prior", *common) == 0
    assert (out / "prior").exists()
    assert _cli("train-3d", *common, "--mask", "fi", "--steps", 2) == 0
    assert _cli("train-3d", *common, "--mask", "fi,fa,fs,fp", "--steps", 2) == 0
    assert _cli("reconstruct", *common, "--scene", "test_view_0000", "--mask", "fi") == 0
    rec = json.loads((out / "recon" / "test_view_0000.gt_pose.fi.json").read_text())
    assert rec["scene_id"] == "test_view_0000" and rec["grid_sizes"] == [32, 64] and rec["mask"] == "fi"
    assert _cli("eval", *common, "--splits", "test_instance", "--masks", "fi;fi,fa,fs,fp") == 0
    first = (out / "eval" / "report.csv").read_bytes()
    assert len(first.decode().splitlines()) == 3
    assert _cli("eval", *common, "--splits", "test_instance", "--masks", "fi;fi,fa,fs,fp") == 0
    assert (out / "eval" / "report.csv").read_bytes() == first
    # validation errors exit 1
    assert _cli("train-3d", *common, "--mask", "fa") == 1
    assert _cli("eval", *common, "--pose-modes", "est_pose") == 1
    assert _cli("no-such-verb") == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train_3d": {"no_such_key": 1}}))
    assert _cli("train-3d", *common, "--config", bad, "--steps", 1) == 1
    # runtime failures exit 2
    assert _cli("eval", "--data-root", tiny_dataset, "--out", tmp_path / "empty", "--masks", "fi") == 2
    capsys.readouterr()


def test_cli_config_overrides(tmp_path, tiny_dataset):
    out = tmp_path / "run"
    common = ["--data-root", tiny_dataset, "--out", out]
    assert _cli("build-prior", *common) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train_3d": {"steps": 2, "points_per_scene": 16}}))
    assert _cli("train-3d", *common, "--config", cfg, "--mask", "fi") == 0
    meta = json.loads((out / "chord_fi.json").read_text())
    found = json.dumps(meta)
    assert '"points_per_scene": 16' in found and '"steps": 2' in found


def test_cli_data_root_env(tmp_path, monkeypatch, hand_model):
    monkeypatch.setenv("HANDPRIOR_DATA", str(tmp_path / "env"))
    assert _cli("gen-data", "--category", "box", "--train", 1, "--test-instance", 1, "--test-view", 1,
                "--n-samples", 100) == 0
    man = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert sum(man["categories"]["box"]["counts"].values()) == 3


def test_cli_gradcheck_runs(capsys, monkeypatch):
    import handprior.gradcheck as gc

    monkeypatch.setattr(gc, "run_gradchecks", lambda seeds: {"mlp": [gc.CHECKS["mlp"](s) for s in seeds]})
    assert _cli("gradcheck", "--n-seeds", 2) == 0
    assert "passed" in capsys.readouterr().out
    assert _cli("gradcheck", "--n-seeds", 1, "--tolerance", 0.0) == 2
