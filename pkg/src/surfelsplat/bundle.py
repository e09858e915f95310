"""Staged two-view bundle adjustment.

The schedule runs four stages over a shared iteration counter:

    [0, b1)   intrinsics only, L1 on view 1
    [b1, b2)  surfels only, photometric loss on both views
    [b2, b3)  view-2 pose only, L1 on view 2, with early stop
    [b3, N)   everything, full objective

View 1 is the canonical frame and always sits at the identity pose.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .backward import GradientBuffers, backward
from .camera import CameraIntrinsics, CameraPose, rotation_angle, se3_exp
from .losses import (LossReport, LossWeights, geometric_objective, l1_with_grad,
                     normal_prior_loss, photometric_loss)
from .raster import RasterConfig, RenderOutput, render
from .surfel import SurfelScene

logger = logging.getLogger(__name__)

SURFEL_GROUPS = ("colors", "centers", "scales", "normals", "opacities")
# depth-warp support: only mostly covered pixels away from depth edges
COVERAGE_THRESHOLD = 0.5
EDGE_TOLERANCE = 0.05


class Stage(str, enum.Enum):
    INTRINSICS = "intrinsics"
    GAUSSIANS = "gaussians"
    POSE = "pose"
    JOINT = "joint"


STAGE_GROUPS = {
    Stage.INTRINSICS: ("focal", "principal"),
    Stage.GAUSSIANS: SURFEL_GROUPS,
    Stage.POSE: ("pose",),
    Stage.JOINT: SURFEL_GROUPS + ("focal", "principal", "pose"),
}


class NonFiniteGradientError(FloatingPointError):
    """A stage produced NaN or infinite gradients and was aborted."""

    def __init__(self, stage: Stage, iteration: int, groups: List[str]):
        self.stage = stage
        self.iteration = iteration
        self.groups = groups
        super().__init__(f"non-finite gradient in {groups} during {stage.value} "
                         f"stage at iteration {iteration}")


@dataclass
class OptimizationSchedule:
    n_iters: int = 100
    intrinsics_end: int = 10
    gaussians_end: int = 20
    pose_end: int = 40
    lr_focal: float = 1.0
    lr_principal: float = 0.1
    lr_gaussians: float = 0.0002
    lr_rotation: float = 0.003
    lr_translation: float = 0.003
    pose_eps: float = 1e-5
    optimizer: str = "adam"         # "adam" or "gd"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # final learning-rate fraction reached by cosine decay within each stage; 1 disables
    lr_final_ratio: float = 1.0
    # differentiate the depth warp itself w.r.t. K and T, not just the rendered depths
    warp_camera_grad: bool = True

    def __post_init__(self):
        b = (0, self.intrinsics_end, self.gaussians_end, self.pose_end, self.n_iters)
        if any(b[i] > b[i + 1] for i in range(len(b) - 1)):
            raise ValueError(f"stage boundaries must be non-decreasing and <= n_iters, got {b}")
        rates = (self.lr_focal, self.lr_principal, self.lr_gaussians,
                 self.lr_rotation, self.lr_translation)
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must lie in (0, 1]")
        self.betas = tuple(float(x) for x in self.betas)

    def stages(self):
        """``(stage, start, end)`` triples in execution order."""
        b = (0, self.intrinsics_end, self.gaussians_end, self.pose_end, self.n_iters)
        names = (Stage.INTRINSICS, Stage.GAUSSIANS, Stage.POSE, Stage.JOINT)
        return [(names[i], b[i], b[i + 1]) for i in range(4)]

    def group_lr(self, group: str) -> np.ndarray:
        if group == "focal":
            return np.full(2, self.lr_focal)
        if group == "principal":
            return np.full(2, self.lr_principal)
        if group == "pose":
            return np.r_[np.full(3, self.lr_rotation), np.full(3, self.lr_translation)]
        return np.asarray(self.lr_gaussians)

    def decay(self, k: int, n: int) -> float:
        if self.lr_final_ratio >= 1.0 or n <= 1:
            return 1.0
        r = self.lr_final_ratio
        return r + (1.0 - r) * 0.5 * (1.0 + math.cos(math.pi * k / (n - 1)))

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationSchedule":
        data = dict(data)
        if "boundaries" in data:
            data["intrinsics_end"], data["gaussians_end"], data["pose_end"] = data.pop("boundaries")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class Observations:
    I1: np.ndarray
    I2: np.ndarray


@dataclass
class BAState:
    scene: SurfelScene
    K: CameraIntrinsics
    pose: CameraPose                 # view 2, canonical frame -> camera 2
    moments: Dict[str, dict] = field(default_factory=dict)
    iteration: int = 0
    pose_converged: bool = False
    pose_stop_iter: Optional[int] = None
    stages_done: List[str] = field(default_factory=list)

    @property
    def pose1(self) -> CameraPose:
        return CameraPose.identity()

    def copy(self) -> "BAState":
        return BAState(self.scene, self.K, self.pose, copy.deepcopy(self.moments),
                       self.iteration, self.pose_converged, self.pose_stop_iter,
                       list(self.stages_done))


def init_intrinsics(width: int, height: int) -> CameraIntrinsics:
    """Initial guess: focal 1.2 times the image size, principal point at the center."""
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    return CameraIntrinsics(1.2 * width, 1.2 * height, 0.5 * width, 0.5 * height, width, height)


# -- optimizer ----------------------------------------------------------------

def _step(state: BAState, group: str, grad: np.ndarray, sched: OptimizationSchedule,
          scale: float) -> np.ndarray:
    """Descent step (to subtract) for one parameter group."""
    lr = sched.group_lr(group) * scale
    if sched.optimizer == "gd":
        return lr * grad
    b1, b2 = sched.betas
    mom = state.moments.get(group)
    if mom is None or mom["m"].shape != grad.shape:
        mom = {"m": np.zeros_like(grad), "v": np.zeros_like(grad), "t": 0}
        state.moments[group] = mom
    mom["t"] += 1
    mom["m"] = b1 * mom["m"] + (1.0 - b1) * grad
    mom["v"] = b2 * mom["v"] + (1.0 - b2) * grad * grad
    m_hat = mom["m"] / (1.0 - b1 ** mom["t"])
    v_hat = mom["v"] / (1.0 - b2 ** mom["t"])
    return lr * m_hat / (np.sqrt(v_hat) + sched.adam_eps)


def _apply_updates(state: BAState, grads: GradientBuffers, groups, sched: OptimizationSchedule,
                   scale: float) -> Optional[float]:
    """Update the active groups in place; returns the pose step norm if the pose moved."""
    scene = state.scene
    changes = {}
    if "colors" in groups:
        changes["colors"] = np.clip(scene.colors - _step(state, "colors", grads.colors, sched, scale), 0.0, 1.0)
    if "centers" in groups:
        changes["centers"] = scene.centers - _step(state, "centers", grads.centers, sched, scale)
    if "scales" in groups:
        # log-space keeps scales positive
        g_log = grads.scales * scene.scales
        changes["scales"] = scene.scales * np.exp(-_step(state, "scales", g_log, sched, scale))
    if "normals" in groups:
        n = scene.normals - _step(state, "normals", grads.normals, sched, scale)
        changes["normals"] = n / np.linalg.norm(n, axis=1, keepdims=True)
    if "opacities" in groups:
        changes["opacities"] = np.clip(
            scene.opacities - _step(state, "opacities", grads.opacities, sched, scale), 0.0, 1.0)
    if changes:
        state.scene = scene.replace(**changes)

    if "focal" in groups or "principal" in groups:
        p = state.K.params
        if "focal" in groups:
            p[:2] -= _step(state, "focal", grads.intrinsics[:2], sched, scale)
        if "principal" in groups:
            p[2:] -= _step(state, "principal", grads.intrinsics[2:], sched, scale)
        state.K = state.K.with_params(p)

    if "pose" in groups:
        xi = -_step(state, "pose", grads.pose, sched, scale)
        state.pose = state.pose.perturbed(xi)
        return float(np.linalg.norm(xi))
    return None


# -- objective ----------------------------------------------------------------

@dataclass
class Evaluation:
    report: LossReport
    stage_loss: float
    grads: GradientBuffers
    out1: RenderOutput
    out2: RenderOutput


def _check_finite(grads: GradientBuffers, groups, stage: Stage, iteration: int):
    bad = []
    for g in groups:
        if g in ("focal", "principal"):
            arr = grads.intrinsics
        else:
            arr = getattr(grads, g)
        if not np.all(np.isfinite(arr)):
            bad.append(g)
    if bad:
        raise NonFiniteGradientError(stage, iteration, bad)


def evaluate(state: BAState, obs: Observations, stage: Optional[Stage],
             weights: LossWeights, cfg: RasterConfig, full_report: bool = True,
             warp_camera_grad: bool = True) -> Evaluation:
    """Loss terms at the current state, plus gradients for ``stage``.

    With ``full_report`` the report carries the full objective regardless of
    stage; the stage loss is what the stage actually minimizes. Without it the
    single-view stages render only the view they need and leave the other
    terms as NaN. ``stage=None`` skips the backward pass.
    """
    scene, K, T = state.scene, state.K, state.pose
    if not full_report and stage in (Stage.INTRINSICS, Stage.POSE):
        return _evaluate_single(state, obs, stage, cfg)
    out1 = render(scene, K, state.pose1, cfg)
    out2 = render(scene, K, T, cfg)
    pho1, g1 = photometric_loss(out1.color, obs.I1, weights.ssim)
    pho2, g2 = photometric_loss(out2.color, obs.I2, weights.ssim)
    gt = geometric_objective(out1.depth, out1.alpha, out2.depth, out2.alpha, K, T,
                             COVERAGE_THRESHOLD, EDGE_TOLERANCE,
                             warp_camera_grad and stage == Stage.JOINT)
    geo = gt.value
    total = weights.pho1 * pho1 + weights.pho2 * pho2 + weights.geo * geo
    normal_val, normal_grad = None, None
    if scene.prior_normals is not None and weights.normal > 0:
        normal_val, normal_grad = normal_prior_loss(scene.normals, scene.prior_normals)
        total += weights.normal * normal_val
    report = LossReport(pho1=pho1, pho2=pho2, geo=geo, normal=normal_val, total=total)

    grads = GradientBuffers.zeros(len(scene))
    stage_loss = total
    if stage == Stage.INTRINSICS:
        stage_loss, gc = l1_with_grad(out1.color, obs.I1)
        report.d_color = {1: gc}
        grads = backward(scene, K, state.pose1, cfg, out1, gc)
    elif stage == Stage.POSE:
        stage_loss, gc = l1_with_grad(out2.color, obs.I2)
        report.d_color = {2: gc}
        grads = backward(scene, K, T, cfg, out2, gc)
    elif stage == Stage.GAUSSIANS:
        stage_loss = weights.pho1 * pho1 + weights.pho2 * pho2
        report.d_color = {1: weights.pho1 * g1, 2: weights.pho2 * g2}
        b1 = backward(scene, K, state.pose1, cfg, out1, report.d_color[1])
        b2 = backward(scene, K, T, cfg, out2, report.d_color[2])
        grads = b1 + b2
    elif stage == Stage.JOINT:
        report.d_color = {1: weights.pho1 * g1, 2: weights.pho2 * g2}
        report.d_depth = {1: weights.geo * gt.d_depth1, 2: weights.geo * gt.d_depth2}
        dA1, dA2 = weights.geo * gt.d_alpha1, weights.geo * gt.d_alpha2
        b1 = backward(scene, K, state.pose1, cfg, out1, report.d_color[1], report.d_depth[1], dA1)
        b2 = backward(scene, K, T, cfg, out2, report.d_color[2], report.d_depth[2], dA2)
        # view 1 is pinned to the canonical frame
        b1.pose[:] = 0.0
        grads = b1 + b2
        grads.intrinsics += weights.geo * gt.d_intrinsics
        grads.pose += weights.geo * gt.d_pose
        if normal_grad is not None:
            report.d_normals = weights.normal * normal_grad
            grads.normals += report.d_normals
    return Evaluation(report, stage_loss, grads, out1, out2)


def _evaluate_single(state: BAState, obs: Observations, stage: Stage,
                     cfg: RasterConfig) -> Evaluation:
    nan = float("nan")
    view = 1 if stage == Stage.INTRINSICS else 2
    pose = state.pose1 if view == 1 else state.pose
    out = render(state.scene, state.K, pose, cfg)
    loss, gc = l1_with_grad(out.color, obs.I1 if view == 1 else obs.I2)
    grads = backward(state.scene, state.K, pose, cfg, out, gc)
    report = LossReport(pho1=nan, pho2=nan, geo=nan, total=nan, d_color={view: gc})
    return Evaluation(report, loss, grads, out if view == 1 else None,
                      out if view == 2 else None)


# -- stages -------------------------------------------------------------------

@dataclass
class TraceEntry:
    iter: int
    stage: str
    L_pho1: float
    L_pho2: float
    L_geo: float
    total: float
    stage_loss: float
    L_n: Optional[float] = None
    pose_step: Optional[float] = None
    event: Optional[str] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _entry(it: int, stage: str, ev: Evaluation, **extra) -> TraceEntry:
    r = ev.report
    return TraceEntry(iter=it, stage=stage, L_pho1=r.pho1, L_pho2=r.pho2, L_geo=r.geo,
                      total=r.total, stage_loss=ev.stage_loss, L_n=r.normal, **extra)


def run_stage(state: BAState, stage: Stage, iters: int, obs: Observations,
              sched: Optional[OptimizationSchedule] = None,
              weights: Optional[LossWeights] = None, cfg: Optional[RasterConfig] = None,
              trace: Optional[list] = None,
              on_iteration: Optional[Callable[[BAState, List[TraceEntry]], None]] = None,
              full_report: bool = True) -> BAState:
    """Run ``iters`` iterations of one stage and return the updated state.

    Only the stage's parameter groups change; everything else keeps its exact
    bits. The pose stage stops early once its tangent step norm drops below
    ``sched.pose_eps``. Each iteration appends one trace entry evaluated before
    the update; ``full_report=False`` restricts it to the stage loss, which is
    much cheaper for the single-view stages.
    """
    sched = sched or OptimizationSchedule()
    weights = weights or LossWeights()
    cfg = cfg or RasterConfig()
    trace = [] if trace is None else trace
    stage = Stage(stage)
    groups = STAGE_GROUPS[stage]
    state = state.copy()
    for k in range(iters):
        if stage == Stage.POSE and state.pose_converged:
            break
        ev = evaluate(state, obs, stage, weights, cfg, full_report, sched.warp_camera_grad)
        _check_finite(ev.grads, groups, stage, state.iteration)
        step = _apply_updates(state, ev.grads, groups, sched, sched.decay(k, iters))
        entry = _entry(state.iteration, stage.value, ev, pose_step=step)
        state.iteration += 1
        if stage == Stage.POSE and step is not None and step < sched.pose_eps:
            state.pose_converged = True
            state.pose_stop_iter = state.iteration
            entry.event = "pose_converged"
        trace.append(entry)
        if on_iteration is not None:
            on_iteration(state, trace)
    state.stages_done.append(stage.value)
    return state


# -- checkpoints --------------------------------------------------------------

class CheckpointWriter:
    """Writes PLY + camera JSON + trace JSONL on a background thread.

    Failures are logged as warnings and never interrupt the optimization.
    """

    def __init__(self, out_dir, every: int = 10):
        self.out_dir = Path(out_dir)
        self.every = every
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._pending: List[Future] = []
        self.failures: List[str] = []

    def __call__(self, state: BAState, trace: List[TraceEntry]):
        if self.every <= 0 or state.iteration % self.every != 0:
            return
        snap = (state.scene, state.K, state.pose, state.iteration,
                [e.to_dict() for e in trace])
        self._pending.append(self._pool.submit(self._write, *snap))

    def _write(self, scene, K, pose, iteration, records):
        from .io import write_camera, write_ply
        import json

        try:
            d = self.out_dir / f"iter_{iteration:04d}"
            d.mkdir(parents=True, exist_ok=True)
            write_ply(d / "scene.ply", scene)
            write_camera(d / "camera.json", K, pose)
            with open(d / "trace.jsonl", "w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
        except Exception as exc:  # degrade to a warning
            msg = f"checkpoint at iteration {iteration} failed: {exc}"
            logger.warning(msg)
            self.failures.append(msg)

    def close(self):
        for f in self._pending:
            f.result()
        self._pool.shutdown(wait=True)


@dataclass
class BAResult:
    state: BAState
    trace: List[TraceEntry]
    final: TraceEntry

    @property
    def scene(self) -> SurfelScene:
        return self.state.scene

    @property
    def K(self) -> CameraIntrinsics:
        return self.state.K

    @property
    def pose(self) -> CameraPose:
        return self.state.pose


def run_algorithm1(scene: SurfelScene, I1: np.ndarray, I2: np.ndarray,
                   K0: Optional[CameraIntrinsics] = None, T0: Optional[CameraPose] = None,
                   sched: Optional[OptimizationSchedule] = None,
                   weights: Optional[LossWeights] = None, cfg: Optional[RasterConfig] = None,
                   checkpoint_dir=None, checkpoint_every: int = 10) -> BAResult:
    """Full staged schedule from an initial scene and two observed images.

    ``K0`` defaults to :func:`init_intrinsics` and ``T0`` to the identity. The
    trace holds one entry per iteration plus a final entry at ``n_iters``
    evaluated on the returned state.
    """
    sched = sched or OptimizationSchedule()
    weights = weights or LossWeights()
    cfg = cfg or RasterConfig()
    H, W = np.asarray(I1).shape[:2]
    if np.asarray(I2).shape != np.asarray(I1).shape:
        raise ValueError("observed images differ in shape")
    K0 = K0 or init_intrinsics(W, H)
    if (K0.width, K0.height) != (W, H):
        raise ValueError("intrinsics image size does not match the observations")
    obs = Observations(np.asarray(I1, dtype=np.float64), np.asarray(I2, dtype=np.float64))
    state = BAState(scene, K0, T0 or CameraPose.identity())

    writer = CheckpointWriter(checkpoint_dir, checkpoint_every) if checkpoint_dir else None
    trace: List[TraceEntry] = []
    try:
        for stage, start, end in sched.stages():
            state = run_stage(state, stage, end - start, obs, sched, weights, cfg, trace, writer)
            # skipped pose iterations still advance the counter
            state.iteration = end
        final = _entry(state.iteration, "final", evaluate(state, obs, None, weights, cfg))
        trace.append(final)
        if writer is not None and state.iteration % checkpoint_every != 0:
            writer.every = 1
            writer(state, trace)
    finally:
        if writer is not None:
            writer.close()
    return BAResult(state, trace, final)


# -- diagnostics --------------------------------------------------------------

def pose_error(est: CameraPose, truth: CameraPose):
    """Rotation error in degrees and camera-center distance."""
    dR = est.rotation @ truth.rotation.T
    c_est = -est.rotation.T @ est.translation
    c_true = -truth.rotation.T @ truth.translation
    return math.degrees(rotation_angle(dR)), float(np.linalg.norm(c_est - c_true))


def perturb_pose(pose: CameraPose, rot_deg: float, trans: float,
                 rng: np.random.Generator) -> CameraPose:
    """Left-perturb by a rotation of exactly ``rot_deg`` about a random axis and
    a camera-center shift of exactly ``trans`` in a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = se3_exp(np.r_[math.radians(rot_deg) * axis, 0, 0, 0]).rotation
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    center = -pose.rotation.T @ pose.translation + trans * d
    R_new = R @ pose.rotation
    return CameraPose(R_new, -R_new @ center)
