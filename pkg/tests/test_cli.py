import json
from pathlib import Path

import numpy as np
import pytest

from handfield import cli

TINY_CONFIG = {
    "optimizer": {
        "initial": {"epochs": 2, "batch_size": 3, "queries_uniform": 32, "queries_surface": 32},
        "refiner": {"epochs": 2, "batch_size": 3, "queries_uniform": 32, "queries_surface": 32},
        "keypoint": {"epochs": 2, "batch_size": 3},
    },
    "model": {"refiner": {"grid_resolution": 24, "n_points": 128}},
    "metrics": {"iou_samples": 4000, "surface_samples": 500, "resolution": 16},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One generated dataset plus all three trained stages, shared module-wide."""
    root = tmp_path_factory.mktemp("cliwork")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    cfg = ["--config", str(cfg_path)]
    data = root / "data"
    ckpt = root / "ckpt"
    assert cli.main(["gen-data", "--out", str(data), "--num", "3", "--seed", "40"]) == 0
    for stage, seed in (("initial", "1"), ("refiner", "2"), ("keypoint", "3")):
        argv = ["train", "--stage", stage, "--data", str(data), "--ckpt", str(ckpt),
                "--seed", seed] + cfg
        assert cli.main(argv) == 0
    return {"root": root, "data": data, "ckpt": ckpt, "cfg": cfg}


# --- gen-data ---------------------------------------------------------------


def test_gen_data_layout_and_determinism(work):
    data = work["data"]
    dirs = sorted(p.name for p in data.iterdir() if p.is_dir())
    assert dirs == ["sample_0000", "sample_0001", "sample_0002"]
    assert (data / "manifest.json").is_file()
    twin = work["root"] / "data_twin"
    assert cli.main(["gen-data", "--out", str(twin), "--num", "3", "--seed", "40"]) == 0
    for name in dirs:
        for fname in ("keypoints.json", "image.png"):
            assert (data / name / fname).read_bytes() == (twin / name / fname).read_bytes()


def test_gen_data_refuses_clobber_without_force(work):
    data = str(work["data"])
    assert cli.main(["gen-data", "--out", data, "--num", "1", "--seed", "0"]) == cli.EXIT_CONFIG
    fresh = work["root"] / "forced"
    assert cli.main(["gen-data", "--out", str(fresh), "--num", "1", "--seed", "0"]) == 0
    argv = ["gen-data", "--out", str(fresh), "--num", "1", "--seed", "0", "--force"]
    assert cli.main(argv) == 0


def test_gen_data_unknown_config_key(work, capsys):
    bad = work["root"] / "bad.json"
    bad.write_text(json.dumps({"generation": {"bogus_key": 3}}))
    argv = ["gen-data", "--out", str(work["root"] / "x"), "--num", "1",
            "--config", str(bad)]
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "generation.bogus_key" in capsys.readouterr().err


def test_gen_data_unknown_optimizer_key(work, capsys):
    bad = work["root"] / "bad_opt.json"
    bad.write_text(json.dumps({"optimizer": {"initial": {"bogus": 1}}}))
    argv = ["gen-data", "--out", str(work["root"] / "y"), "--num", "1",
            "--config", str(bad)]
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "optimizer.initial.bogus" in capsys.readouterr().err


def test_gen_data_budget_exhaustion(work):
    impossible = work["root"] / "impossible.json"
    impossible.write_text(json.dumps({"generation": {"clearance_mm": 500.0, "max_tries": 20}}))
    argv = ["gen-data", "--out", str(work["root"] / "z"), "--num", "1",
            "--config", str(impossible)]
    assert cli.main(argv) == cli.EXIT_GENERATION


# --- train ------------------------------------------------------------------


def test_train_outputs(work):
    for stage in ("initial", "refiner", "keypoint"):
        stage_dir = work["ckpt"] / stage
        assert (stage_dir / "manifest.json").is_file()
        report = json.loads((stage_dir / "train_report.json").read_text())
        assert report["stage"] == stage
        assert len(report["losses"]) == report["final_metrics"]["steps"] == 2
        assert all(np.isfinite(report["losses"]))


def test_train_refiner_requires_initial(work):
    argv = ["train", "--stage", "refiner", "--data", str(work["data"]),
            "--ckpt", str(work["root"] / "no_ckpt")] + work["cfg"]
    assert cli.main(argv) == cli.EXIT_MISSING_CHECKPOINT


def test_train_determinism(work):
    losses = []
    for name in ("det_a", "det_b"):
        ckpt = work["root"] / name
        argv = ["train", "--stage", "initial", "--data", str(work["data"]),
                "--ckpt", str(ckpt), "--seed", "1"] + work["cfg"]
        assert cli.main(argv) == 0
        losses.append(json.loads((ckpt / "initial" / "train_report.json").read_text())["losses"])
    assert losses[0] == losses[1]


def test_train_refuses_clobber(work):
    argv = ["train", "--stage", "initial", "--data", str(work["data"]),
            "--ckpt", str(work["ckpt"]), "--seed", "1"] + work["cfg"]
    assert cli.main(argv) == cli.EXIT_CONFIG


# --- reconstruct ------------------------------------------------------------


@pytest.fixture(scope="module")
def recon(work):
    out = work["root"] / "rec"
    argv = ["reconstruct", "--sample", str(work["data"] / "sample_0000"),
            "--ckpt", str(work["ckpt"]), "--out", str(out),
            "--resolution", "16"] + work["cfg"]
    assert cli.main(argv) == 0
    return out


def test_reconstruct_outputs(recon):
    for name in ("left.obj", "right.obj", "metrics.json"):
        assert (recon / name).is_file()
    report = json.loads((recon / "metrics.json").read_text())
    assert report["extra"]["refined"] is True
    assert report["extra"]["refined_keypoints"] is False
    assert (recon / "diagnostics" / "diagnostics.json").is_file()


def test_reconstruct_no_refine_marker(work):
    out = work["root"] / "rec_nr"
    argv = ["reconstruct", "--sample", str(work["data"] / "sample_0000"),
            "--ckpt", str(work["ckpt"]), "--out", str(out),
            "--resolution", "16", "--no-refine"] + work["cfg"]
    assert cli.main(argv) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["extra"]["refined"] is False
    assert not (out / "diagnostics").exists()


def test_reconstruct_keypoint_pipeline(work):
    out = work["root"] / "rec_kp"
    argv = ["reconstruct", "--sample", str(work["data"] / "sample_0001"),
            "--ckpt", str(work["ckpt"]), "--out", str(out), "--resolution", "16",
            "--no-refine", "--refine-keypoints", "--keypoint-noise", "5",
            "--seed", "9"] + work["cfg"]
    assert cli.main(argv) == 0
    refined = json.loads((out / "keypoints_refined.json").read_text())
    assert np.asarray(refined["keypoints_mm"]).shape == (42, 3)
    report = json.loads((out / "metrics.json").read_text())
    assert report["extra"]["refined_keypoints"] is True
    assert report["extra"]["keypoint_noise_sigma"] == 5.0
    assert report["mpjpe_mm"] > 0


def test_reconstruct_resolution_monotonicity(work):
    counts = {}
    for res in ("24", "32"):
        out = work["root"] / f"rec_res{res}"
        argv = ["reconstruct", "--sample", str(work["data"] / "sample_0000"),
                "--ckpt", str(work["ckpt"]), "--out", str(out),
                "--resolution", res, "--no-refine"] + work["cfg"]
        assert cli.main(argv) == 0
        text = (out / "left.obj").read_text()
        counts[res] = sum(line.startswith("v ") for line in text.splitlines())
    assert counts["32"] >= counts["24"]


def test_reconstruct_missing_checkpoint(work):
    argv = ["reconstruct", "--sample", str(work["data"] / "sample_0000"),
            "--ckpt", str(work["root"] / "nowhere"), "--out",
            str(work["root"] / "rec_missing")] + work["cfg"]
    assert cli.main(argv) == cli.EXIT_MISSING_CHECKPOINT


# --- eval -------------------------------------------------------------------


def test_eval_oracle_debug(work):
    out = work["root"] / "oracle_metrics.json"
    argv = ["eval", "--data", str(work["data"]), "--ckpt", str(work["ckpt"]),
            "--out", str(out), "--oracle"] + work["cfg"]
    assert cli.main(argv) == 0
    report = json.loads(out.read_text())
    mean = report["mean"]["initial"]
    assert mean["iou_left"] == mean["iou_right"] == mean["iou_combined"] == 1.0
    assert mean["chamfer_left_mm"] == mean["chamfer_right_mm"] == 0.0
    assert sorted(report["samples"]) == ["sample_0000", "sample_0001", "sample_0002"]


def test_eval_trained_stages_and_aggregation(work):
    out = work["root"] / "metrics.json"
    argv = ["eval", "--data", str(work["data"]), "--ckpt", str(work["ckpt"]),
            "--out", str(out)] + work["cfg"]
    assert cli.main(argv) == 0
    report = json.loads(out.read_text())
    assert sorted(report["samples"]) == ["sample_0000", "sample_0001", "sample_0002"]
    for field_kind in ("initial", "refined"):
        per = [report["samples"][s][field_kind]["iou"]["combined"] for s in report["samples"]]
        assert report["mean"][field_kind]["iou_combined"] == pytest.approx(
            float(np.mean(per)), abs=1e-12
        )
    assert report["mean"]["mpjpe_corrupted_mm"] > 0
    assert report["mean"]["mpjpe_refined_mm"] is not None
