"""Planar geometry shared by the simulator, the mask codec and evaluation.

Frames: the ego frame has x pointing forward and y pointing left.  BEV images
are ego-centred with forward at the top (row 0) and left at column 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidBoxError(ValueError):
    pass


def wrap_angle(angle):
    """Wrap angle(s) into (-pi, pi]."""
    if isinstance(angle, np.ndarray):
        return math.pi - np.mod(math.pi - angle, TWO_PI)
    return math.pi - math.fmod(math.fmod(math.pi - angle, TWO_PI) + TWO_PI, TWO_PI)


def se2_inverse_apply(pose, points):
    """Express global ``points`` (N, 2) in the frame of ``pose`` = (x, y, yaw)."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.asarray(points, dtype=np.float64) - np.array([x, y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def se2_apply(pose, points):
    """Map ``points`` expressed in the frame of ``pose`` into the global frame."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([x + c * p[..., 0] - s * p[..., 1], y + s * p[..., 0] + c * p[..., 1]], axis=-1)


@dataclass(frozen=True)
class OrientedBox:
    """Bird's-eye rectangle. ``length`` runs along ``heading``."""

    cx: float
    cy: float
    heading: float
    length: float
    width: float
    score: float = 1.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.heading, self.length, self.width, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box parameters: {vals}")
        if self.length <= 0 or self.width <= 0:
            raise InvalidBoxError(f"box size must be positive, got length={self.length} width={self.width}")
        if self.length < self.width:
            raise InvalidBoxError(f"length {self.length} < width {self.width}")
        if not -math.pi < self.heading <= math.pi:
            raise InvalidBoxError(f"heading {self.heading} not wrapped to (-pi, pi]")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidBoxError(f"score {self.score} outside [0, 1]")

    @classmethod
    def make(cls, cx, cy, heading, length, width, score=1.0):
        """Build a box from loose parameters: swaps sides so length >= width and wraps heading."""
        length, width = float(length), float(width)
        heading = float(heading)
        if width > length:
            length, width = width, length
            heading += math.pi / 2
        return cls(float(cx), float(cy), wrap_angle(heading), length, width, float(min(max(score, 0.0), 1.0)))

    @property
    def area(self) -> float:
        return self.length * self.width

    def with_score(self, score: float) -> "OrientedBox":
        return replace(self, score=float(score))

    def corners(self) -> np.ndarray:
        """Corners (4, 2) in counter-clockwise order."""
        return box_corners(self.cx, self.cy, self.heading, self.length, self.width)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.heading, self.length, self.width, self.score])


def box_corners(cx, cy, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def points_in_box(points, cx, cy, heading, length, width) -> np.ndarray:
    """Boolean mask of ``points`` (..., 2) lying inside the closed rectangle."""
    c, s = math.cos(heading), math.sin(heading)
    dx = points[..., 0] - cx
    dy = points[..., 1] - cy
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)


@dataclass(frozen=True)
class GridSpec:
    """Ego-centred, ego-aligned square BEV grid."""

    size: int = 64
    cell_size: float = 0.5

    def __post_init__(self):
        if self.size < 1 or self.cell_size <= 0:
            raise ValueError(f"invalid grid {self}")

    @property
    def half_extent(self) -> float:
        return self.size * self.cell_size / 2.0

    def cell_centers(self) -> np.ndarray:
        """Ego-frame (x, y) of every cell centre, shape (size, size, 2)."""
        idx = np.arange(self.size)
        xs = (self.size / 2.0 - idx - 0.5) * self.cell_size
        ys = (self.size / 2.0 - idx - 0.5) * self.cell_size
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    def cell_of(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, inside) for ego-frame points (..., 2)."""
        p = np.asarray(points, dtype=np.float64)
        row = np.floor(self.size / 2.0 - p[..., 0] / self.cell_size).astype(np.int64)
        col = np.floor(self.size / 2.0 - p[..., 1] / self.cell_size).astype(np.int64)
        inside = (row >= 0) & (row < self.size) & (col >= 0) & (col < self.size)
        return row, col, inside

    def contains(self, x: float, y: float) -> bool:
        h = self.half_extent
        return -h <= x <= h and -h <= y <= h
