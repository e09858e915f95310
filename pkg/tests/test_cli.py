import json

import numpy as np
import pytest

from conftest import run_cli_pipeline, tree_bytes
from surfelsplat import io
from surfelsplat.cli import EXIT_FAILED, EXIT_USAGE, main


def test_synth_outputs(tmp_path, capsys):
    outs = run_cli_pipeline(tmp_path, 1, capsys)
    b = tmp_path / "bundle"
    for name in ("scene_truth.ply", "scene_init.ply", "I1.pfm", "I2.pfm", "D1.pfm", "D2.pfm",
                 "A1.pfm", "A2.pfm", "I1.png", "I2.png", "camera_truth.json", "spec.json",
                 "meta.json"):
        assert (b / name).is_file(), name
    info = json.loads(outs["synth"])
    assert info["n_surfels"] == len(io.read_ply(b / "scene_truth.ply"))
    assert json.loads((b / "spec.json").read_text())["seed"] == 3

    # the truth camera file carries the view-2 pose
    assert np.array_equal(io.read_pfm(tmp_path / "r/color.pfm"), io.read_pfm(b / "I2.pfm"))
    m = json.loads(outs["metrics"])
    assert m["psnr"] >= 99.0 and m["ssim"] == pytest.approx(1.0)

    cal = json.loads(outs["calibrate"])
    assert cal["final_loss"] <= cal["initial_loss"]
    K, _ = io.read_camera(tmp_path / "r/calib.json")
    assert K is not None and K.width == 24
    assert len((tmp_path / "r/calib.jsonl").read_text().splitlines()) == 8

    pose = json.loads(outs["pose"])
    assert 1 <= pose["iterations"] <= 8

    ba = tmp_path / "ba"
    for name in ("trace.jsonl", "scene.ply", "camera.json", "render1.pfm", "render2.pfm",
                 "summary.json", "figures/loss_curves.png", "figures/renders.png",
                 "figures/depth_residual.png"):
        assert (ba / name).is_file(), name
    summary = json.loads((ba / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert summary["final"]["total_ratio"] < 1.0
    assert sorted(p.name for p in (ba / "checkpoints").iterdir()) == [
        "iter_0005", "iter_0010", "iter_0012"]

    gc = json.loads(outs["gradcheck"])
    assert gc["passed"]
    assert (tmp_path / "r/gradcheck.png").is_file()
    assert json.loads(outs["report"])["entries"] == 13
    assert (tmp_path / "r/loss.png").stat().st_size > 0


def test_threads_bit_identical(tmp_path, capsys):
    a, b = tmp_path / "t1", tmp_path / "t4"
    a.mkdir()
    b.mkdir()
    out1 = run_cli_pipeline(a, 1, capsys)
    out4 = run_cli_pipeline(b, 4, capsys)
    assert out1 == out4
    fa, fb = tree_bytes(a), tree_bytes(b)
    assert fa.keys() == fb.keys()
    diff = [k for k in fa if fa[k] != fb[k]]
    assert not diff, diff


def test_tile_size_does_not_change_render(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    paths = []
    for ts in (4, 8, 16):
        out = tmp_path / f"c{ts}.pfm"
        assert main(["render", "--scene", str(tmp_path / "b/scene_init.ply"), "--camera",
                     str(tmp_path / "b/camera_truth.json"), "--out", str(out),
                     "--tile-size", str(ts)]) == 0
        paths.append(out.read_bytes())
    assert paths[0] == paths[1] == paths[2]


def test_missing_file_exits_nonzero(tmp_path, capsys):
    code = main(["render", "--scene", str(tmp_path / "nope.ply"), "--camera",
                 str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.pfm")])
    assert code == EXIT_FAILED
    assert "error" in capsys.readouterr().err


def test_bad_spec_exits_nonzero(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"preset": "cube"}))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_FAILED


def test_negative_threads_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--threads", "-1"]) == EXIT_USAGE


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_corrupt_ply_exits_nonzero(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"not a ply file\n")
    cam = tmp_path / "cam.json"
    from surfelsplat.camera import CameraIntrinsics

    io.write_camera(cam, CameraIntrinsics(20, 20, 8, 8, 16, 16))
    assert main(["render", "--scene", str(bad), "--camera", str(cam),
                 "--out", str(tmp_path / "x.pfm")]) == EXIT_FAILED
