"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .geometry import GridSpec  # noqa: E402

COLORS = {0.1: "tab:blue", 0.3: "tab:green", 0.5: "tab:orange", 0.7: "tab:red"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_pr_curves(curves: dict, path, title: str = "Precision-recall") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for th, curve in sorted(curves.items()):
        if curve.points:
            r, p = curve.recalls, curve.precisions
            ax.step(np.r_[0.0, r], np.r_[p[0], p], where="post", color=COLORS.get(th), label=f"IoU {th:.1f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if any(c.points for c in curves.values()):
        ax.legend(loc="lower left")
    return _save(fig, path)


def _draw_boxes(ax, boxes, grid: GridSpec, color):
    h = grid.half_extent
    for b in boxes:
        c = b.corners()
        # ego frame (x fwd, y left) -> axes (right = -y, up = x)
        ax.add_patch(Polygon(np.stack([-c[:, 1], c[:, 0]], axis=1), closed=True, fill=False, ec=color, lw=1.2))
    ax.set_xlim(-h, h)
    ax.set_ylim(-h, h)
    ax.set_aspect("equal")
    ax.set_facecolor("black")
    ax.plot([0], [0], marker="^", color="white", ms=5)


def plot_frame_comparison(frame, output, grid: GridSpec, path, title: str = "") -> Path:
    """Top row: inputs and ground truth; bottom row: decoded outputs."""
    fig, axes = plt.subplots(2, 4, figsize=(11, 5.6))
    top = [frame.camera, frame.lidar_bev, frame.roadmap]
    bottom = [output.camera, output.lidar, output.roadmap]
    names = ["camera", "lidar", "roadmap", "vehicles"]
    for k in range(3):
        for row, img in ((0, top[k]), (1, bottom[k])):
            ax = axes[row, k]
            if img is not None:
                ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
    _draw_boxes(axes[0, 3], frame.gt_boxes, grid, "lime")
    _draw_boxes(axes[1, 3], output.boxes, grid, "orange")
    for k, n in enumerate(names):
        axes[0, k].set_title(n)
    axes[0, 0].set_ylabel("ground truth")
    axes[1, 0].set_ylabel("decoded")
    for ax in axes[:, 3]:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_training_curves(metrics: list[dict], path) -> Path:
    it = np.array([m["iter"] for m in metrics])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    axes[0].plot(it, [-m["total"] for m in metrics], lw=0.8)
    axes[0].set_title("negative ELBO")
    axes[0].set_xlabel("iteration")
    for key in ("camera_ll", "lidar_ll", "detection_ll", "roadmap_ll", "pose_ll", "kl_initial", "kl_steps"):
        vals = np.array([m[key] for m in metrics])
        if np.any(vals != 0):
            axes[1].plot(it, np.abs(vals), lw=0.8, label=key)
    axes[1].set_yscale("symlog")
    axes[1].set_title("|component|")
    axes[1].set_xlabel("iteration")
    axes[1].legend(fontsize=7)
    return _save(fig, path)
