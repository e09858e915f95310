import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from surfelsplat.camera import CameraIntrinsics, CameraPose
from surfelsplat.surfel import SurfelScene

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def onaxis_scene(depths, opacities, colors=None, scale=0.05):
    """Fronto-parallel surfels centered on the optical axis."""
    n = len(depths)
    colors = np.ones((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64)
    centers = np.zeros((n, 3))
    centers[:, 2] = depths
    return SurfelScene(colors=colors, centers=centers, scales=np.full((n, 2), scale),
                       normals=np.tile([0.0, 0.0, -1.0], (n, 1)),
                       opacities=np.asarray(opacities, dtype=np.float64))


def random_scene(rng, n=24, size=24, depth=(2.0, 4.0)):
    """Small random scene in front of a ``size`` x ``size`` camera."""
    K = CameraIntrinsics(1.1 * size, 1.1 * size, size / 2 - 0.3, size / 2 + 0.2, size, size)
    d = rng.uniform(*depth, n)
    uv = rng.uniform(0, size, (n, 2))
    centers = np.stack([(uv[:, 0] - K.cx) / K.fx * d, (uv[:, 1] - K.cy) / K.fy * d, d], axis=1)
    normals = rng.normal(size=(n, 3))
    normals[:, 2] = -np.abs(normals[:, 2]) - 1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    scene = SurfelScene(colors=rng.uniform(0, 1, (n, 3)), centers=centers,
                        scales=d[:, None] / K.fx * rng.uniform(1.0, 3.0, (n, 2)),
                        normals=normals, opacities=rng.uniform(0.2, 0.9, n))
    return scene, K


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_planes():
    from surfelsplat.synthetic import SyntheticSceneSpec, generate_synthetic

    return generate_synthetic(SyntheticSceneSpec(preset="two-planes", seed=0))


@pytest.fixture
def identity_pose():
    return CameraPose.identity()


CLI_SPEC = {"preset": "two-planes", "width": 24, "height": 24, "resolution": 24, "seed": 3}
CLI_BA_CONFIG = {
    "seed": 5,
    "schedule": {"n_iters": 12, "intrinsics_end": 3, "gaussians_end": 6, "pose_end": 9},
    "init": {"intrinsics": "truth", "focal_scale": [1.05, 0.95], "principal_offset": [0.5, -0.5],
             "pose": "truth", "rot_deg": 2.0, "trans_frac": 0.01},
}


def run_cli_pipeline(workdir, threads, capsys):
    """Run every CLI command inside ``workdir``; return stdout per command.

    Paths are relative so that printed output is comparable across directories.
    """
    import json
    import os

    from surfelsplat.cli import main

    common = ["--threads", str(threads)]
    steps = [
        ("synth", ["synth", "--spec", "spec_in.json", "--out", "bundle"]),
        ("render", ["render", "--scene", "bundle/scene_truth.ply", "--camera",
                    "bundle/camera_truth.json", "--out", "r/color.pfm", "--png", "r/color.png",
                    "--depth", "r/depth.pfm"]),
        ("calibrate", ["calibrate", "--scene", "bundle/scene_truth.ply", "--image",
                       "bundle/I1.pfm", "--iters", "8", "--out", "r/calib.json",
                       "--trace", "r/calib.jsonl"]),
        ("pose", ["pose", "--scene", "bundle/scene_truth.ply", "--camera", "r/calib.json",
                  "--image", "bundle/I2.pfm", "--iters", "8", "--out", "r/pose.json"]),
        ("ba", ["ba", "--bundle", "bundle", "--config", "ba.json", "--out", "ba",
                "--checkpoint-every", "5"]),
        ("gradcheck", ["gradcheck", "--scenes", "1", "--figure", "r/gradcheck.png"]),
        ("metrics", ["metrics", "--a", "r/color.pfm", "--b", "bundle/I2.pfm"]),
        ("report", ["report", "--trace", "ba/trace.jsonl", "--out", "r/loss.png"]),
    ]
    old = os.getcwd()
    os.chdir(workdir)
    try:
        with open("spec_in.json", "w") as fh:
            json.dump(CLI_SPEC, fh)
        with open("ba.json", "w") as fh:
            json.dump(CLI_BA_CONFIG, fh)
        outputs = {}
        for name, argv in steps:
            capsys.readouterr()
            code = main(argv + common)
            assert code == 0, f"{name} exited {code}"
            outputs[name] = capsys.readouterr().out
        return outputs
    finally:
        os.chdir(old)


def tree_bytes(root):
    """Map of relative path to file contents under ``root``."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
