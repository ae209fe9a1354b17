"""Oriented boxes <-> dense BEV detection masks, plus rotated IoU and greedy NMS.

Regression channels, per positive cell: ``(cos h, sin h, dx, dy, log w, log l)``
where ``(dx, dy)`` is the metric offset from the cell centre to the box centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GridSpec, InvalidBoxError, OrientedBox, box_corners, points_in_box

REG_CHANNELS = 6


class DecodeError(ValueError):
    pass


@dataclass
class DetectionMask:
    cls: np.ndarray  # (H, W, 1)
    reg: np.ndarray  # (H, W, 6)
    grid: GridSpec

    def __post_init__(self):
        h = self.grid.size
        if self.cls.shape != (h, h, 1) or self.reg.shape != (h, h, REG_CHANNELS):
            raise ValueError(f"mask shapes {self.cls.shape}/{self.reg.shape} do not match grid size {h}")


def _clip(subject: list, clipper: np.ndarray) -> list:
    """Sutherland-Hodgman clip of polygon ``subject`` against convex CCW ``clipper``."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs, output = output, []
        prev = inputs[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inputs:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_cross_point(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_cross_point(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly) -> float:
    """Shoelace area (positive for CCW)."""
    if len(poly) < 3:
        return 0.0
    area = 0.0
    px, py = poly[-1]
    for x, y in poly:
        area += px * y - x * py
        px, py = x, y
    return 0.5 * area


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    rr = (a.length + a.width + b.length + b.width) / 2.0
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > rr * rr:
        return 0.0
    ca = [tuple(p) for p in box_corners(a.cx, a.cy, a.heading, a.length, a.width)]
    cb = box_corners(b.cx, b.cy, b.heading, b.length, b.width)
    inter = max(polygon_area(_clip(ca, cb)), 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def nms(candidates: Sequence[OrientedBox], iou_threshold: float) -> list[OrientedBox]:
    """Greedy NMS. Ties in score keep the earlier candidate first."""
    if not candidates:
        return []
    scores = np.array([c.score for c in candidates])
    order = np.lexsort((np.arange(len(candidates)), -scores))
    centers = np.array([[c.cx, c.cy] for c in candidates])
    radii = np.array([math.hypot(c.length, c.width) / 2.0 for c in candidates])
    alive = np.ones(len(candidates), dtype=bool)
    kept = []
    for idx in order:
        if not alive[idx]:
            continue
        alive[idx] = False
        box = candidates[idx]
        kept.append(box)
        # circumscribed-circle prefilter; only touching pairs need polygon clipping
        near = alive & (np.sum((centers - centers[idx]) ** 2, axis=1) <= (radii + radii[idx]) ** 2)
        for j in np.flatnonzero(near):
            if rotated_iou(box, candidates[j]) > iou_threshold:
                alive[j] = False
    return kept


def encode_boxes(boxes: Sequence[OrientedBox], grid: GridSpec) -> DetectionMask:
    h = grid.size
    cls = np.zeros((h, h, 1))
    reg = np.zeros((h, h, REG_CHANNELS))
    if not boxes:
        return DetectionMask(cls, reg, grid)
    for b in boxes:
        if not (b.length > 0 and b.width > 0):
            raise InvalidBoxError(f"box with non-positive size: {b}")
    centers = grid.cell_centers()
    best_dist = np.full((h, h), np.inf)
    owner = np.full((h, h), -1)
    for k, b in enumerate(boxes):
        inside = points_in_box(centers, b.cx, b.cy, b.heading, b.length, b.width)
        dist = np.hypot(centers[..., 0] - b.cx, centers[..., 1] - b.cy)
        # strict comparison keeps the lower index on ties
        take = inside & (dist < best_dist)
        best_dist[take] = dist[take]
        owner[take] = k
    for k, b in enumerate(boxes):
        sel = owner == k
        if not sel.any():
            continue
        cls[sel, 0] = 1.0
        reg[sel, 0] = math.cos(b.heading)
        reg[sel, 1] = math.sin(b.heading)
        reg[sel, 2] = b.cx - centers[sel][:, 0]
        reg[sel, 3] = b.cy - centers[sel][:, 1]
        reg[sel, 4] = math.log(b.width)
        reg[sel, 5] = math.log(b.length)
    return DetectionMask(cls, reg, grid)


def decode_mask(
    mask: DetectionMask,
    score_threshold: float = 0.5,
    nms_iou: float = 0.1,
    max_candidates: int | None = None,
) -> list[OrientedBox]:
    """Turn a mask into scored boxes sorted by descending score.

    ``max_candidates`` keeps only the highest-scoring cells before NMS.
    """
    cls = np.asarray(mask.cls)[..., 0]
    reg = np.asarray(mask.reg)
    rows, cols = np.nonzero(cls >= score_threshold)
    if rows.size == 0:
        return []
    scores = cls[rows, cols]
    order = np.lexsort((np.arange(rows.size), -scores))
    if max_candidates is not None:
        order = order[:max_candidates]
    rows, cols, scores = rows[order], cols[order], scores[order]
    sel = reg[rows, cols].astype(np.float64)
    bad = ~np.isfinite(sel).all(axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise DecodeError(f"non-finite regression at cell ({rows[k]}, {cols[k]})")
    centers = mask.grid.cell_centers()[rows, cols]
    heading = np.arctan2(sel[:, 1], sel[:, 0])
    # clamp log-sizes: untrained decoders can emit values that overflow exp
    width = np.exp(np.clip(sel[:, 4], -10.0, 10.0))
    length = np.exp(np.clip(sel[:, 5], -10.0, 10.0))
    cands = [
        OrientedBox.make(centers[i, 0] + sel[i, 2], centers[i, 1] + sel[i, 3], heading[i], length[i], width[i], scores[i])
        for i in range(rows.size)
    ]
    kept = nms(cands, nms_iou)
    return sorted(kept, key=lambda b: -b.score)
