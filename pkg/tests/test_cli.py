from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from radcal.cli import main
from radcal.formats import load_report, read_json


@pytest.fixture(scope="module")
def capture(tmp_path_factory):
    d = tmp_path_factory.mktemp("capture")
    assert main(["synth", "--preset", "fisheye", "--images", "10", "--noise", "0.3", "--seed", "3", "--out", str(d)]) == 0
    (d / "config.json").write_text(json.dumps({"iterations": 40}))
    return d


@pytest.fixture(scope="module")
def calibrated(capture):
    out = capture / "calib.json"
    args = ["calibrate", "--detections", str(capture / "train.json"), "--boards", str(capture / "boards.json"),
            "--model", "kb", "--config", str(capture / "config.json"), "--out", str(out)]
    assert main(args) == 0
    return out, args


def test_synth_writes_split(capture):
    train = read_json(capture / "train.json")["detections"]
    test = read_json(capture / "test.json")["detections"]
    assert len({d["image_id"] for d in train}) == 8
    assert len({d["image_id"] for d in test}) == 2
    assert (capture / "gt.json").exists() and (capture / "outliers.csv").exists()


def test_calibrate_writes_artifacts(calibrated):
    out, _ = calibrated
    cal, score, cfg = load_report(out)
    assert cal.model.kind.value == "kb" and cal.division is not None
    assert cfg.iterations == 40
    assert score.rms_inlier < 1.0
    csv_lines = out.with_suffix(".residuals.csv").read_text().splitlines()
    assert csv_lines[0].startswith("image_id,board_id,fiducial_id")
    assert out.with_suffix(".residuals.svg").read_text().lstrip().startswith("<?xml")


def test_calibrate_is_byte_identical(calibrated, tmp_path):
    out, args = calibrated
    again = tmp_path / "again.json"
    assert main(args[:-1] + [str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()
    svg = lambda p: p.with_suffix(".residuals.svg").read_bytes()
    assert svg(again) == svg(out)


def test_evaluate_on_training_data_reproduces_score(calibrated, capture, tmp_path):
    out, _ = calibrated
    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--calib", str(out), "--detections", str(capture / "train.json"),
                 "--boards", str(capture / "boards.json"), "--out", str(ev)]) == 0
    _, score, _ = load_report(out)
    got = read_json(ev)["score"]
    assert got["robust_loss"] == pytest.approx(score.robust_loss, rel=1e-9, abs=1e-9)
    assert got["inlier_ratio"] == score.inlier_ratio


def test_evaluate_holdout(calibrated, capture, tmp_path):
    out, _ = calibrated
    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--calib", str(out), "--detections", str(capture / "test.json"),
                 "--boards", str(capture / "boards.json"), "--out", str(ev)]) == 0
    doc = read_json(ev)
    assert doc["failures"] == [] and doc["score"]["rms_inlier"] < 1.0


def test_convert_same_division_is_identity(calibrated, tmp_path):
    out, _ = calibrated
    conv = tmp_path / "div.json"
    assert main(["convert", "--calib", str(out), "--model", "div-even", "--out", str(conv)]) == 0
    cal, _, _ = load_report(out)
    new, score, _ = load_report(conv)
    assert score is None
    assert new.model.params == cal.division.profile.coeffs
    assert read_json(conv)["extra"]["converted_from"] == "kb"


def test_convert_to_eucm_outside_range_exits_2(calibrated, tmp_path, capsys):
    out, _ = calibrated
    doc = read_json(out)
    doc["intrinsics"] = {"e": [600.0, 400.0], "a": 1.0, "f": 300.0}
    doc["division"] = {"coeffs": [-0.2, -0.05], "r_max": 1.0}
    src = tmp_path / "forced.json"
    src.write_text(json.dumps(doc))
    assert main(["convert", "--calib", str(src), "--model", "eucm", "--out", str(tmp_path / "x.json")]) == 2
    assert "InvalidParams" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_unknown_board_id_exits_1(calibrated, capture, tmp_path, capsys):
    out, _ = calibrated
    det = read_json(capture / "test.json")
    det["detections"][0]["board_id"] = "ghost"
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(det))
    assert main(["evaluate", "--calib", str(out), "--detections", str(p),
                 "--boards", str(capture / "boards.json"), "--out", str(tmp_path / "e.json")]) == 1
    assert "ghost" in capsys.readouterr().err


def test_empty_test_file_exits_1(calibrated, capture, tmp_path):
    out, _ = calibrated
    p = tmp_path / "empty.json"
    p.write_text(json.dumps({"detections": []}))
    assert main(["evaluate", "--calib", str(out), "--detections", str(p),
                 "--boards", str(capture / "boards.json"), "--out", str(tmp_path / "e.json")]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["synth", "--preset", "nope", "--out", "x"],
        ["synth", "--preset", "wide", "--images", "0", "--out", "x"],
        ["synth", "--preset", "wide", "--outliers", "2", "--out", "x"],
        ["calibrate", "--model", "kb"],
        [],
    ],
)
def test_bad_arguments_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        rc = main(argv)
        raise SystemExit(rc)
    assert exc.value.code == 1


def test_bad_config_exits_1(capture, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 0}))
    assert main(["calibrate", "--detections", str(capture / "train.json"), "--boards", str(capture / "boards.json"),
                 "--model", "kb", "--config", str(cfg), "--out", str(tmp_path / "o.json")]) == 1


def test_thread_variable_must_be_integer(monkeypatch, tmp_path):
    monkeypatch.setenv("BABELCALIB_THREADS", "many")
    assert main(["synth", "--preset", "wide", "--out", str(tmp_path)]) == 1


def test_corner_study_cli(tmp_path):
    assert main(["study", "--which", "corner-correction", "--trials", "2", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "corner_correction.csv").read_text().splitlines()
    assert lines[0].startswith("profile,sigma,variant")
    assert len(lines) == 1 + 2 * 2 * 21
    assert (tmp_path / "corner_correction.svg").exists()


@pytest.mark.skipif(shutil.which("radcal") is None, reason="console script not installed")
def test_console_script_runs(tmp_path):
    r = subprocess.run(["radcal", "synth", "--preset", "pinhole", "--images", "2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "radcal", "synth", "--preset", "wide", "--images", "1", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert not (tmp_path / "test.json").exists()


def test_holdout_rms_close_to_training(calibrated, capture, tmp_path):
    out, _ = calibrated
    ev = tmp_path / "eval.json"
    main(["evaluate", "--calib", str(out), "--detections", str(capture / "test.json"),
          "--boards", str(capture / "boards.json"), "--out", str(ev)])
    _, score, _ = load_report(out)
    assert read_json(ev)["score"]["rms_weighted"] == pytest.approx(score.rms_weighted, rel=0.2)


def test_converted_kb_matches_direct_kb(calibrated, capture, tmp_path):
    direct, _ = calibrated
    div = tmp_path / "div.json"
    assert main(["calibrate", "--detections", str(capture / "train.json"), "--boards", str(capture / "boards.json"),
                 "--model", "div-even", "--config", str(capture / "config.json"), "--out", str(div)]) == 0
    kb = tmp_path / "kb.json"
    assert main(["convert", "--calib", str(div), "--model", "kb", "--out", str(kb)]) == 0
    rms = {}
    for name, report in (("direct", direct), ("converted", kb)):
        ev = tmp_path / f"{name}.eval.json"
        assert main(["evaluate", "--calib", str(report), "--detections", str(capture / "test.json"),
                     "--boards", str(capture / "boards.json"), "--out", str(ev)]) == 0
        rms[name] = read_json(ev)["score"]["rms_weighted"]
    assert rms["converted"] <= 1.1 * rms["direct"]


def test_ground_truth_report_scores_zero_on_clean_output(tmp_path):
    assert main(["synth", "--preset", "catadioptric", "--images", "5", "--out", str(tmp_path)]) == 0
    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--calib", str(tmp_path / "gt.json"), "--detections", str(tmp_path / "train.json"),
                 "--boards", str(tmp_path / "boards.json"), "--out", str(ev)]) == 0
    assert read_json(ev)["score"]["robust_loss"] < 1e-12
    assert read_json(tmp_path / "gt.json")["score"]["robust_loss"] < 1e-12


def test_study_outputs_repeat_per_seed(tmp_path):
    for d in ("a", "b"):
        assert main(["study", "--which", "corner-correction", "--trials", "2", "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for f in ("corner_correction.csv", "corner_correction.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_degree_study_cli_rows(tmp_path, monkeypatch):
    from radcal import synth

    full = synth.degree_selection_study
    monkeypatch.setattr(
        synth, "degree_selection_study",
        lambda seed=0: full(presets=("fisheye",), n_images=4, seed=seed, config=synth.RansacConfig(iterations=10)),
    )
    assert main(["study", "--which", "degree-selection", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "degree_selection.csv").read_text().splitlines()
    degrees = [int(line.split(",")[1]) for line in lines[1:]]
    assert degrees == [2, 4, 6, 8, 10]
    assert (tmp_path / "degree_selection.svg").exists()
