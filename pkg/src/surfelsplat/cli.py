"""Command-line entry point: ``surfelsplat <command> [options]``.

Every command accepts ``--threads`` and ``--seed``. Outputs depend only on the
inputs and the seed, never on the thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bundle import (
    BAState,
    NonFiniteGradientError,
    Observations,
    OptimizationSchedule,
    Stage,
    init_intrinsics,
    perturb_pose,
    pose_error,
    run_algorithm1,
    run_stage,
)
from .camera import CameraPose
from .losses import LossWeights, geometric_objective
from .metrics import metrics_report
from .raster import RasterConfig, render

logger = logging.getLogger("surfelsplat")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_NONFINITE = 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj) + "\n")


def _write_trace(path: Path, trace):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in trace:
            fh.write(json.dumps(e.to_dict()) + "\n")


def _read_trace(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _scene_scale(depth, alpha) -> float:
    d = depth[alpha > 0.5] / alpha[alpha > 0.5]
    return float(np.median(d)) if d.size else 1.0


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg):
    from .synthetic import SyntheticSceneSpec, generate_synthetic

    data = io.load_config(args.spec) if args.spec else {}
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SyntheticSceneSpec.from_dict(data)
    b = generate_synthetic(spec, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_ply(out / "scene_truth.ply", b.scene_truth)
    io.write_ply(out / "scene_init.ply", b.scene_init)
    for name in ("I1", "I2", "D1", "D2", "A1", "A2"):
        io.write_pfm(out / f"{name}.pfm", getattr(b, name))
    io.write_png(out / "I1.png", b.I1)
    io.write_png(out / "I2.png", b.I2)
    io.write_camera(out / "camera_truth.json", b.K_truth, b.T_truth)
    _write_json(out / "spec.json", spec.to_dict())
    _write_json(out / "meta.json", {"n_surfels": len(b.scene_truth), "overlap": b.overlap,
                                    "scene_scale": _scene_scale(b.D1, b.A1)})
    print(_dump({"out": str(out), "n_surfels": len(b.scene_truth), "overlap": b.overlap}))
    return EXIT_OK


def cmd_render(args, cfg):
    scene = io.read_ply(args.scene)
    K, pose = io.read_camera(args.camera)
    if K is None:
        raise SystemExit("camera file has no intrinsics")
    out = render(scene, K, pose or CameraPose.identity(), cfg)
    for w in out.warnings:
        logger.warning(w)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    io.write_pfm(path, out.color)
    if args.depth:
        io.write_pfm(args.depth, out.depth)
    if args.png:
        io.write_png(args.png, out.color)
    return EXIT_OK


def _initial_camera(args, shape):
    H, W = shape[:2]
    if getattr(args, "camera", None):
        K, pose = io.read_camera(args.camera)
        if K is not None:
            return K, pose
        return init_intrinsics(W, H), pose
    return init_intrinsics(W, H), None


def cmd_calibrate(args, cfg):
    scene = io.read_ply(args.scene)
    image = io.read_image(args.image)
    K0, _ = _initial_camera(args, image.shape)
    sched = OptimizationSchedule(n_iters=args.iters, intrinsics_end=args.iters,
                                 gaussians_end=args.iters, pose_end=args.iters)
    state = BAState(scene, K0, CameraPose.identity())
    trace = []
    state = run_stage(state, Stage.INTRINSICS, args.iters, Observations(image, image), sched,
                      cfg=cfg, trace=trace, full_report=False)
    io.write_camera(args.out, state.K)
    if args.trace:
        _write_trace(Path(args.trace), trace)
    print(_dump({"fx": state.K.fx, "fy": state.K.fy, "cx": state.K.cx, "cy": state.K.cy,
                 "initial_loss": trace[0].stage_loss if trace else None,
                 "final_loss": trace[-1].stage_loss if trace else None}))
    return EXIT_OK


def cmd_pose(args, cfg):
    scene = io.read_ply(args.scene)
    image = io.read_image(args.image)
    K, pose0 = _initial_camera(args, image.shape)
    pose0 = pose0 or CameraPose.identity()
    sched = OptimizationSchedule(n_iters=args.iters, intrinsics_end=0, gaussians_end=0,
                                 pose_end=args.iters, pose_eps=args.eps)
    state = BAState(scene, K, pose0)
    trace = []
    state = run_stage(state, Stage.POSE, args.iters, Observations(image, image), sched,
                      cfg=cfg, trace=trace, full_report=False)
    io.write_camera(args.out, K, state.pose)
    if args.trace:
        _write_trace(Path(args.trace), trace)
    print(_dump({"iterations": len(trace), "converged": state.pose_converged,
                 "stop_iter": state.pose_stop_iter,
                 "final_loss": trace[-1].stage_loss if trace else None}))
    return EXIT_OK


def _ba_initial(conf: dict, rng, K_truth, T_truth, scale):
    """Initial intrinsics and pose from the ``[init]`` config table."""
    init = conf.get("init", {})
    W, H = K_truth.width, K_truth.height
    if init.get("intrinsics", "default") == "truth":
        K0 = K_truth
    else:
        K0 = init_intrinsics(W, H)
    p = K0.params
    p[:2] *= np.asarray(init.get("focal_scale", [1.0, 1.0]), dtype=np.float64)
    p[2:] += np.asarray(init.get("principal_offset", [0.0, 0.0]), dtype=np.float64)
    K0 = K0.with_params(p)
    if init.get("pose", "identity") == "truth":
        T0 = T_truth
    else:
        T0 = CameraPose.identity()
    rot, trans = float(init.get("rot_deg", 0.0)), float(init.get("trans_frac", 0.0))
    if rot > 0 or trans > 0:
        T0 = perturb_pose(T0, rot, trans * scale, rng)
    return K0, T0


def cmd_ba(args, cfg):
    bundle = Path(args.bundle)
    conf = io.load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
    rng = np.random.default_rng(seed)
    sched = OptimizationSchedule.from_dict(conf.get("schedule", {}))
    weights = LossWeights(**conf.get("weights", {}))
    scene_name = conf.get("scene", "init")
    scene = io.read_ply(bundle / f"scene_{scene_name}.ply")
    I1, I2 = io.read_image(bundle / "I1.pfm"), io.read_image(bundle / "I2.pfm")
    K_truth, T_truth = io.read_camera(bundle / "camera_truth.json")
    D1, A1 = io.read_pfm(bundle / "D1.pfm"), io.read_pfm(bundle / "A1.pfm")
    scale = _scene_scale(D1.astype(np.float64), A1.astype(np.float64))
    K0, T0 = _ba_initial(conf, rng, K_truth, T_truth, scale)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = run_algorithm1(scene, I1, I2, K0, T0, sched, weights, cfg,
                             checkpoint_dir=out / "checkpoints",
                             checkpoint_every=args.checkpoint_every)
    except NonFiniteGradientError as exc:
        logger.error(str(exc))
        _write_json(out / "summary.json", {"status": "nonfinite", "stage": exc.stage.value,
                                           "iteration": exc.iteration, "groups": exc.groups})
        return EXIT_NONFINITE

    _write_trace(out / "trace.jsonl", res.trace)
    io.write_ply(out / "scene.ply", res.scene)
    io.write_camera(out / "camera.json", res.K, res.pose)
    r1 = render(res.scene, res.K, CameraPose.identity(), cfg)
    r2 = render(res.scene, res.K, res.pose, cfg)
    io.write_pfm(out / "render1.pfm", r1.color)
    io.write_pfm(out / "render2.pfm", r2.color)
    gt = geometric_objective(r1.depth, r1.alpha, r2.depth, r2.alpha, res.K, res.pose,
                             warp_camera_grad=False)
    rot_err, center_err = pose_error(res.pose, T_truth)
    depth_range = float(np.ptp(D1[A1 > 0.5] / A1[A1 > 0.5])) if np.any(A1 > 0.5) else 1.0
    summary = {
        "status": "ok",
        "seed": seed,
        "schedule": sched.to_dict(),
        "weights": {k: getattr(weights, k) for k in ("ssim", "pho1", "pho2", "geo", "normal")},
        "initial": {"intrinsics": K0.params.tolist(), "pose_error_deg": pose_error(T0, T_truth)[0]},
        "final": {
            "intrinsics": res.K.params.tolist(),
            "truth_intrinsics": K_truth.params.tolist(),
            "rotation_error_deg": rot_err,
            "center_error": center_err,
            "center_error_rel": center_err / scale,
            "view1": metrics_report(r1.color, I1),
            "view2": metrics_report(r2.color, I2),
            "L_geo": res.final.L_geo,
            "L_geo_rel_range": gt.value / depth_range if depth_range > 0 else None,
            "total": res.final.total,
            "total_ratio": res.final.total / res.trace[0].total,
        },
        "pose_stop_iter": res.state.pose_stop_iter,
    }
    _write_json(out / "summary.json", summary)
    if not args.no_figures:
        from . import plotting

        fig = out / "figures"
        plotting.plot_loss_curves([e.to_dict() for e in res.trace], fig / "loss_curves.png")
        plotting.plot_render_comparison([r1.color, r2.color], [I1, I2], fig / "renders.png")
        plotting.plot_depth_residual(gt.depth1, gt.warped, gt.mask, fig / "depth_residual.png")
    print(_dump({"out": str(out), "psnr1": summary["final"]["view1"]["psnr"],
                 "psnr2": summary["final"]["view2"]["psnr"],
                 "rotation_error_deg": rot_err, "L_geo": res.final.L_geo}))
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    report = run_suite(n_scenes=args.scenes, seed=seed, cfg=cfg)
    logger.info("gradcheck took %.1f s", report.pop("seconds"))
    print(_dump(report))
    if args.figure:
        from .plotting import plot_gradcheck

        plot_gradcheck(report, args.figure)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_metrics(args, cfg):
    a, b = io.read_image(args.a), io.read_image(args.b)
    if a.shape != b.shape:
        raise SystemExit(f"shape mismatch: {a.shape} vs {b.shape}")
    rep = metrics_report(np.clip(a, 0, 1), np.clip(b, 0, 1))
    print(_dump(rep))
    return EXIT_OK


def cmd_report(args, cfg):
    from . import plotting

    trace = _read_trace(args.trace)
    path = plotting.plot_loss_curves(trace, args.out)
    print(_dump({"figure": str(path), "entries": len(trace)}))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for rendering (0 = one per core)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--tile-size", type=int, default=8, help="rasterizer tile edge in pixels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="surfelsplat",
                                description="Gaussian-surfel splatting and two-view bundle adjustment.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic two-view bundle")
    s.add_argument("--spec", help="scene spec (JSON or TOML); defaults apply when omitted")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", parents=[common], help="render a scene from a camera")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True, help="color image (PFM)")
    s.add_argument("--png", help="also write an 8-bit PNG")
    s.add_argument("--depth", help="also write the depth map (PFM)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("calibrate", parents=[common], help="intrinsics stage only")
    s.add_argument("--scene", required=True)
    s.add_argument("--image", required=True, help="observed view-1 image")
    s.add_argument("--camera", help="initial intrinsics (default: 1.2x image size, centered)")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="write the per-iteration trace (JSONL)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("pose", parents=[common], help="pose stage only")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True, help="intrinsics and optional initial pose")
    s.add_argument("--image", required=True, help="observed view-2 image")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--eps", type=float, default=1e-5, help="tangent step norm for early stop")
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="write the per-iteration trace (JSONL)")
    s.set_defaults(func=cmd_pose)

    s = sub.add_parser("ba", parents=[common], help="full staged bundle adjustment")
    s.add_argument("--bundle", required=True, help="directory written by 'synth'")
    s.add_argument("--config", help="schedule, weights and initialization (TOML or JSON)")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint-every", type=int, default=10)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_ba)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--figure", help="bar chart of per-group errors")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM between two images")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("report", parents=[common], help="plot loss curves from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", required=True, help="figure path (PNG, PDF or SVG)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 0:
        print("--threads must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    cfg = RasterConfig(tile_size=args.tile_size, threads=args.threads)
    try:
        return args.func(args, cfg)
    except (io.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
