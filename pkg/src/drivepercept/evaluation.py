"""Filtering rollouts and perception metrics (PR curves, AP@IoU, ego-pose errors)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .geometry import GridSpec, OrientedBox, wrap_angle
from .latentmodel import LatentModel, extract_pose, sample_gaussian
from .maskcodec import DetectionMask, decode_mask, rotated_iou

IOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


class RolloutError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "mean"
    seed: int = 0
    min_score: float = 0.01
    nms_iou: float = 0.1
    max_candidates: int | None = 300
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS
    cell_size: float = 0.5


@dataclass
class StepOutput:
    boxes: list[OrientedBox]
    roadmap: np.ndarray  # (H, W, 3) decoded mean
    pose: np.ndarray  # (3,) global x, y, yaw
    camera: np.ndarray | None = None
    lidar: np.ndarray | None = None
    cls: np.ndarray | None = None


def _frame_tensors(frame, dtype):
    cam = torch.as_tensor(frame.camera[None]).to(dtype)
    lid = torch.as_tensor(frame.lidar_bev[None]).to(dtype)
    return cam, lid


@torch.no_grad()
def filter_rollout(
    model: LatentModel,
    episode,
    mode: str = "mean",
    seed: int = 0,
    grid: GridSpec | None = None,
    min_score: float = 0.01,
    nms_iou: float = 0.1,
    max_candidates: int | None = 300,
    keep_images: bool = False,
) -> list[StepOutput]:
    """Causal filtering over an episode; frames are processed one at a time."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    cfg = model.cfg
    grid = grid or GridSpec(cfg.image_size, 0.5)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    outputs: list[StepOutput] = []
    z = None
    for t, frame in enumerate(episode.frames):
        cam, lid = _frame_tensors(frame, dtype)
        if z is None:
            q = model.initial_posterior(cam, lid)
        else:
            a = torch.as_tensor(episode.actions[t - 1].as_array()[None]).to(dtype)
            q = model.step_posterior(z, a, cam, lid)
        if mode == "mean":
            z = q.mean
        else:
            z = sample_gaussian(q, torch.randn(q.mean.shape, generator=gen, dtype=dtype))
        if not torch.isfinite(z).all():
            raise RolloutError(f"non-finite latent at step {t}")
        det = model.decode_detection(z)
        mask = DetectionMask(det.cls[0].double().numpy(), det.reg[0].double().numpy(), grid)
        boxes = decode_mask(mask, min_score, nms_iou, max_candidates)
        roadmap = model.decode_roadmap(z)[0].double().numpy()
        pose = extract_pose(model.decode_pose(z).mean[0].double().numpy(), cfg.map_bounds)
        out = StepOutput(boxes, roadmap, pose)
        if keep_images:
            c, l = model.decode_sensors(z)
            out.camera, out.lidar, out.cls = c[0].double().numpy(), l[0].double().numpy(), mask.cls
        outputs.append(out)
    return outputs


# ---------------------------------------------------------------- PR / AP


@dataclass
class PrCurve:
    points: list[tuple[float, float, float]]  # (recall, precision, score threshold)
    iou_threshold: float
    n_ground_truth: int = 0
    undefined: bool = False

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def precisions(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def match_detections(detections: Sequence[Sequence[OrientedBox]], ground_truth: Sequence[Sequence[OrientedBox]], iou_threshold: float):
    """Greedy matching in pooled descending-score order.

    Returns (scores, is_tp) arrays over the pooled detections, sorted.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection frames vs {len(ground_truth)} ground-truth frames")
    pooled = [(d.score, f, k) for f, dets in enumerate(detections) for k, d in enumerate(dets)]
    # stable: equal scores keep frame/list order
    pooled.sort(key=lambda x: -x[0])
    used = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    scores, tp = [], []
    for score, f, k in pooled:
        det = detections[f][k]
        best, best_iou = -1, -1.0
        for j, g in enumerate(ground_truth[f]):
            if used[f][j]:
                continue
            iou = rotated_iou(det, g)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[f][best] = True
        scores.append(score)
        tp.append(best >= 0)
    return np.array(scores, dtype=np.float64), np.array(tp, dtype=bool)


def pr_curve(detections, ground_truth, iou_threshold: float) -> PrCurve:
    n_gt = sum(len(g) for g in ground_truth)
    scores, tp = match_detections(detections, ground_truth, iou_threshold)
    if n_gt == 0:
        return PrCurve([], iou_threshold, 0, undefined=True)
    if scores.size == 0:
        return PrCurve([], iou_threshold, n_gt)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # one point per distinct score: the last index of each tie group
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    points = [(float(ctp[i] / n_gt), float(ctp[i] / (ctp[i] + cfp[i])), float(scores[i])) for i in last]
    return PrCurve(points, iou_threshold, n_gt)


def average_precision(curve: PrCurve) -> float:
    """All-point interpolated area under the precision envelope."""
    if not curve.points:
        return 0.0
    rec = np.concatenate([[0.0], curve.recalls, [1.0]])
    prec = np.concatenate([[0.0], curve.precisions, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def pose_errors(estimates, ground_truth) -> tuple[float, float]:
    est = np.asarray(estimates, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 3)
    if est.shape != gt.shape:
        raise ValueError(f"pose sequences differ in length: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        return 0.0, 0.0
    loc = np.hypot(est[:, 0] - gt[:, 0], est[:, 1] - gt[:, 1]).mean()
    head = np.abs(wrap_angle(est[:, 2] - gt[:, 2])).mean()
    return float(loc), float(head)


# ---------------------------------------------------------------- evaluation driver


@dataclass
class EvalReport:
    ap: dict[float, float]
    location_error_m: float
    heading_error_rad: float
    per_episode: list[dict] = field(default_factory=list)
    variant: str = ""
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": {f"{k:.1f}": v for k, v in self.ap.items()},
            "location_error_m": self.location_error_m,
            "heading_error_rad": self.heading_error_rad,
            "per_episode": self.per_episode,
            "variant": self.variant,
            "flags": self.flags,
        }


@dataclass
class EvalResult:
    report: EvalReport
    curves: dict[float, PrCurve]
    rollouts: list[list[StepOutput]]


Rollout = Callable[[object, int], list[StepOutput]]


def evaluate(model: LatentModel | None, episodes, config: EvalConfig = EvalConfig(), variant: str = "", rollout: Rollout | None = None) -> EvalResult:
    """Roll out every episode and aggregate detection and localisation metrics.

    ``rollout(episode, index)`` overrides the model rollout (e.g. to score a
    fixed detector); by default :func:`filter_rollout` is used.
    """
    if not episodes:
        raise ValueError("evaluate needs at least one episode")
    grid = GridSpec(model.cfg.image_size, config.cell_size) if model is not None else None
    dets, gts, rollouts, per_ep = [], [], [], []
    all_est, all_gt = [], []
    for i, ep in enumerate(episodes):
        try:
            if rollout is not None:
                outs = rollout(ep, i)
            else:
                outs = filter_rollout(model, ep, config.mode, config.seed + i, grid, config.min_score, config.nms_iou, config.max_candidates)
        except RolloutError as exc:
            raise RolloutError(f"episode {i} (seed {ep.seed}): {exc}") from exc
        ep_dets = [[b for b in o.boxes if b.score >= config.min_score] for o in outs]
        ep_gts = [f.gt_boxes for f in ep.frames]
        est = np.array([o.pose for o in outs])
        gt = np.array([f.ego_pose for f in ep.frames], dtype=np.float64)
        loc, head = pose_errors(est, gt)
        per_ep.append({
            "episode": i,
            "seed": ep.seed,
            "ap": {f"{th:.1f}": average_precision(pr_curve(ep_dets, ep_gts, th)) for th in config.iou_thresholds},
            "location_error_m": loc,
            "heading_error_rad": head,
        })
        dets += ep_dets
        gts += ep_gts
        all_est.append(est)
        all_gt.append(gt)
        rollouts.append(outs)
    curves = {th: pr_curve(dets, gts, th) for th in config.iou_thresholds}
    flags = [f"no ground-truth boxes at IoU {th}" for th, c in curves.items() if c.undefined]
    loc, head = pose_errors(np.concatenate(all_est), np.concatenate(all_gt))
    report = EvalReport({th: average_precision(c) for th, c in curves.items()}, loc, head, per_ep, variant, flags)
    return EvalResult(report, curves, rollouts)


def write_report(result: EvalResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json"]
    paths[0].write_text(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    for th, curve in result.curves.items():
        p = out / f"pr_curve_iou{th:.1f}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["recall", "precision", "score_threshold"])
            for r, pr, s in curve.points:
                w.writerow([repr(r), repr(pr), repr(s)])
        paths.append(p)
    return paths


def ground_truth_rollout(episode, index: int) -> list[StepOutput]:
    """Perfect perception outputs read back from the episode's own supervision."""
    return [StepOutput(list(f.gt_boxes), f.roadmap, np.asarray(f.ego_pose, dtype=np.float64)) for f in episode.frames]
