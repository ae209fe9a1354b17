"""Sensor and supervision rendering for a world state.

All renderers return uint8 RGB arrays; :func:`to_float` maps them to [0, 1].
"""

from __future__ import annotations

import math

import numpy as np

from ..geometry import GridSpec, OrientedBox, se2_apply, se2_inverse_apply, wrap_angle
from .dynamics import WorldState

# roadmap palette
RM_BACKGROUND = (0, 0, 0)
RM_ROAD = (128, 128, 128)
RM_MARKING = (255, 255, 255)
RM_STOP = (255, 0, 0)
RM_JUNCTION = (96, 96, 160)

# camera palette
CAM_SKY = (135, 190, 235)
CAM_GROUND = (90, 130, 70)
CAM_ROAD = (110, 110, 110)
CAM_MARKING = (240, 240, 240)
CAM_STOP = (220, 40, 40)
CAM_BUILDING = (150, 120, 100)
CAM_VEHICLE = (30, 60, 220)

BUILDING_HEIGHT = 8.0
VEHICLE_HEIGHT = 1.5
CAMERA_MAX_DIST = 80.0


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def _obstacle_boxes(state: WorldState, include_static=True):
    boxes = [v.box() for v in state.traffic]
    if include_static:
        boxes += list(state.world.static_obstacles)
    return boxes


def _ego_frame_edges(state: WorldState, max_dist: float) -> np.ndarray:
    """Edges (E, 2, 2) of every obstacle/vehicle polygon near the ego, in the ego frame."""
    ego = state.ego
    edges = []
    for b in _obstacle_boxes(state):
        r = math.hypot(b.length, b.width) / 2
        if math.hypot(b.cx - ego.x, b.cy - ego.y) > max_dist + r:
            continue
        c = se2_inverse_apply(ego.pose, b.corners())
        edges.append(np.stack([c, np.roll(c, -1, axis=0)], axis=1))
    if not edges:
        return np.zeros((0, 2, 2))
    return np.concatenate(edges)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def ray_hits(edges: np.ndarray, directions: np.ndarray, max_range: float) -> np.ndarray:
    """First-hit distance along each unit ray from the origin (``max_range`` if none)."""
    if len(edges) == 0:
        return np.full(len(directions), max_range)
    a = edges[None, :, 0, :]
    e = edges[None, :, 1, :] - edges[None, :, 0, :]
    u = directions[:, None, :]
    denom = _cross(u, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(a, e) / denom
        s = _cross(a, u) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
    t = np.where(ok, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def _visible_cells(edges: np.ndarray, centers: np.ndarray, cell: float) -> np.ndarray:
    """True where the segment origin -> centre crosses no edge outside the centre's own cell."""
    if len(edges) == 0 or len(centers) == 0:
        return np.ones(len(centers), dtype=bool)
    a = edges[None, :, 0, :]
    e = edges[None, :, 1, :] - edges[None, :, 0, :]
    c = centers[:, None, :]
    denom = _cross(c, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(a, e) / denom
        s = _cross(a, c) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 0.0) & (t <= 1.0) & (s >= 0.0) & (s <= 1.0)
    q = t[..., None] * c
    half = cell / 2.0 + 1e-9
    in_cell = (np.abs(q[..., 0] - c[..., 0]) <= half) & (np.abs(q[..., 1] - c[..., 1]) <= half)
    return ~(hit & ~in_cell).any(axis=1)


def render_lidar_bev(state: WorldState, grid: GridSpec, beams: int | None = None, max_range: float | None = None) -> np.ndarray:
    cfg = state.config
    beams = beams or cfg.lidar_beams
    max_range = max_range or cfg.lidar_range or grid.half_extent * math.sqrt(2.0)
    img = np.zeros((grid.size, grid.size, 3), dtype=np.uint8)
    ang = 2.0 * math.pi * np.arange(beams) / beams
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    edges = _ego_frame_edges(state, max_range)
    hits = ray_hits(edges, dirs, max_range)

    # ground returns along each ray up to the first hit
    step = grid.cell_size / 4.0
    ts = (np.arange(int(max_range / step) + 1) + 0.5) * step
    before = ts[None, :] < hits[:, None]
    pts = ts[None, :, None] * dirs[:, None, :]
    pts = pts[before]
    if len(pts):
        ground = state.world.drivable(se2_apply(state.ego.pose, pts))
        row, col, inside = grid.cell_of(pts[ground])
        img[row[inside], col[inside], 1] = 255

    # above-ground returns: the cell that holds each first hit
    hit_rays = hits < max_range
    if hit_rays.any():
        hp = hits[hit_rays, None] * dirs[hit_rays]
        row, col, inside = grid.cell_of(hp)
        cells = np.unique(np.stack([row[inside], col[inside]], axis=1), axis=0)
        if len(cells):
            centers = grid.cell_centers()[cells[:, 0], cells[:, 1]]
            vis = _visible_cells(edges, centers, grid.cell_size)
            cells = cells[vis]
            img[cells[:, 0], cells[:, 1], 0] = 255
            img[cells[:, 0], cells[:, 1], 1] = 0
    return img


def render_roadmap(state: WorldState, grid: GridSpec) -> np.ndarray:
    pts = se2_apply(state.ego.pose, grid.cell_centers())
    world = state.world
    img = np.zeros((grid.size, grid.size, 3), dtype=np.uint8)
    road = world.drivable(pts)
    img[road] = RM_ROAD
    img[road & world.in_junction_box(pts)] = RM_JUNCTION
    img[road & world.center_marking(pts)] = RM_MARKING
    img[road & world.stop_lines(pts)] = RM_STOP
    return img


def render_camera(state: WorldState, size: int | None = None) -> np.ndarray:
    """Flat-ground pinhole view ahead of the ego with boxes drawn as flat quads."""
    cfg = state.config
    h = w = size or cfg.image_size
    horizon = float(cfg.horizon_row if cfg.horizon_row is not None else h // 3)
    f = (w / 2.0) / math.tan(math.radians(cfg.camera_fov_deg) / 2.0)
    cam_h = cfg.camera_height
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = CAM_SKY

    rows = np.arange(h) + 0.5 - horizon
    cols = np.arange(w) + 0.5 - w / 2.0
    ground_rows = rows > 0
    dist = np.where(ground_rows, cam_h * f / np.where(ground_rows, rows, 1.0), np.inf)
    gx = np.broadcast_to(dist[:, None], (h, w))
    gy = -cols[None, :] * gx / f
    valid = np.broadcast_to(ground_rows[:, None], (h, w)) & (gx <= CAMERA_MAX_DIST)
    img[np.broadcast_to(ground_rows[:, None], (h, w))] = CAM_GROUND
    if valid.any():
        local = np.stack([gx[valid], gy[valid]], axis=-1)
        pts = se2_apply(state.ego.pose, local)
        world = state.world
        colors = np.empty((len(pts), 3), dtype=np.uint8)
        colors[:] = CAM_GROUND
        road = world.drivable(pts)
        colors[road] = CAM_ROAD
        colors[road & world.center_marking(pts, 0.25)] = CAM_MARKING
        colors[road & world.stop_lines(pts)] = CAM_STOP
        img[valid] = colors

    quads = []
    for b, height, color in [(v.box(), VEHICLE_HEIGHT, CAM_VEHICLE) for v in state.traffic] + [
        (o, BUILDING_HEIGHT, CAM_BUILDING) for o in state.world.static_obstacles
    ]:
        c = se2_inverse_apply(state.ego.pose, b.corners())
        if c[:, 0].max() <= 0.5 or np.min(np.hypot(c[:, 0], c[:, 1])) > CAMERA_MAX_DIST:
            continue
        near = max(c[:, 0].min(), 0.5)
        xs = np.maximum(c[:, 0], 0.5)
        us = -f * c[:, 1] / xs + w / 2.0
        c0 = int(math.floor(max(us.min(), 0.0)))
        c1 = int(math.ceil(min(us.max(), float(w))))
        bottom = horizon + cam_h * f / near
        top = horizon - (height - cam_h) * f / near
        r0 = int(math.floor(max(top, 0.0)))
        r1 = int(math.ceil(min(bottom, float(h))))
        if c1 > c0 and r1 > r0:
            quads.append((near, r0, r1, c0, c1, color))
    for _, r0, r1, c0, c1, color in sorted(quads, key=lambda q: -q[0]):
        img[r0:r1, c0:c1] = color
    return img


def ground_truth_boxes(state: WorldState, grid: GridSpec) -> list[OrientedBox]:
    ego = state.ego
    boxes = []
    for v in state.traffic:
        local = se2_inverse_apply(ego.pose, np.array([v.x, v.y]))
        x, y = float(local[0]), float(local[1])
        if grid.contains(x, y):
            boxes.append(OrientedBox(x, y, wrap_angle(v.yaw - ego.yaw), v.length, v.width))
    return boxes
