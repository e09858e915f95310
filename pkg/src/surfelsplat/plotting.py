"""Report figures: loss curves, render comparisons and depth residuals.

Everything renders with the Agg backend straight to files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated runs byte-identical
    "svg.hashsalt": "surfelsplat",
}

_STAGE_COLORS = {"intrinsics": "#4c72b0", "gaussians": "#55a868", "pose": "#c44e52",
                 "joint": "#8172b2", "final": "#333333"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_loss_curves(trace: Sequence[dict], path) -> Path:
    """Per-term losses against iteration, with stage spans shaded."""
    its = np.array([e["iter"] for e in trace])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.6))
        ax = axes[0]
        for key, label in (("L_pho1", "photometric, view 1"), ("L_pho2", "photometric, view 2"),
                           ("L_geo", "depth warp")):
            vals = np.array([e.get(key, np.nan) for e in trace], dtype=float)
            ax.semilogy(its, vals, label=label, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)

        ax = axes[1]
        ax.semilogy(its, [e["total"] for e in trace], color="k", lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("weighted total")
        for a in axes:
            _shade_stages(a, trace)
        fig.tight_layout()
        return _save(fig, path)


def _shade_stages(ax, trace):
    start = None
    stage = None
    for e in list(trace) + [{"iter": None, "stage": None}]:
        if e["stage"] != stage:
            if stage is not None and stage != "final":
                ax.axvspan(start, e["iter"] if e["iter"] is not None else start + 1,
                           color=_STAGE_COLORS.get(stage, "#999999"), alpha=0.08, lw=0)
            stage, start = e["stage"], e["iter"]


def plot_render_comparison(rendered: Iterable[np.ndarray], observed: Iterable[np.ndarray],
                           path, titles: Optional[Sequence[str]] = None) -> Path:
    """Rows of (render, observation, absolute error) per view."""
    rendered = list(rendered)
    observed = list(observed)
    n = len(rendered)
    titles = titles or [f"view {i + 1}" for i in range(n)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(6.0, 2.0 * n), squeeze=False)
        for i, (r, o) in enumerate(zip(rendered, observed)):
            err = np.abs(np.asarray(r) - np.asarray(o)).mean(axis=-1)
            axes[i, 0].imshow(np.clip(r, 0, 1), interpolation="nearest")
            axes[i, 1].imshow(np.clip(o, 0, 1), interpolation="nearest")
            im = axes[i, 2].imshow(err, cmap="magma", interpolation="nearest")
            fig.colorbar(im, ax=axes[i, 2], fraction=0.046, pad=0.04)
            axes[i, 0].set_ylabel(titles[i])
        for a, t in zip(axes[0], ("render", "observed", "|error|")):
            a.set_title(t)
        for a in axes.ravel():
            a.set_xticks([])
            a.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)


def plot_depth_residual(depth1: np.ndarray, warped: np.ndarray, mask: np.ndarray, path) -> Path:
    """View-1 depth, warped view-2 depth and their residual on the compared mask."""
    resid = np.where(mask, warped - depth1, np.nan)
    vmin = float(np.min(depth1[depth1 > 0])) if np.any(depth1 > 0) else 0.0
    vmax = float(np.max(depth1))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.0, 2.2))
        axes[0].imshow(np.where(depth1 > 0, depth1, np.nan), vmin=vmin, vmax=vmax, cmap="viridis")
        axes[0].set_title("depth, view 1")
        axes[1].imshow(np.where(mask, warped, np.nan), vmin=vmin, vmax=vmax, cmap="viridis")
        axes[1].set_title("warped from view 2")
        lim = float(np.nanmax(np.abs(resid))) if np.any(mask) else 1.0
        im = axes[2].imshow(resid, cmap="coolwarm", vmin=-lim, vmax=lim)
        axes[2].set_title("residual")
        fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
        for a in axes:
            a.set_xticks([])
            a.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)


def plot_gradcheck(report: dict, path) -> Path:
    """Worst relative error per parameter group against the tolerance."""
    groups = report["groups"]
    names = [g["param_group"] for g in groups]
    errs = np.maximum([g["max_rel_err"] for g in groups], 1e-18)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.4))
        ax.bar(names, errs, color="#4c72b0")
        ax.axhline(report["tolerance"], color="#c44e52", lw=1, ls="--", label="tolerance")
        ax.set_yscale("log")
        ax.set_ylabel("max relative error")
        ax.tick_params(axis="x", rotation=45)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
