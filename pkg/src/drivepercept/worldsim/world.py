"""Grid-road world maps: streets, lanes, intersections, buildings."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..geometry import GridSpec, OrientedBox


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    bounds: float = 200.0
    pitch: float = 50.0
    lane_width: float = 3.5
    n_traffic: int = 20
    image_size: int = 64
    cell_size: float = 0.5
    lidar_beams: int = 360
    lidar_range: float | None = None
    camera_fov_deg: float = 90.0
    camera_height: float = 1.6
    horizon_row: int | None = None
    dt: float = 0.1
    v_max: float = 15.0
    ego_target_speed: float = 7.0
    traffic_speed: tuple[float, float] = (5.0, 8.0)
    building_setback: float = 2.0
    turn_setback: float = 4.0

    def __post_init__(self):
        if self.pitch <= 0 or self.bounds < 2 * self.pitch:
            raise InvalidConfigError(f"bounds {self.bounds} must be >= 2 x pitch {self.pitch}")
        if self.lane_width <= 2.2:
            raise InvalidConfigError(f"lane width {self.lane_width} must exceed the widest vehicle (2.2 m)")
        if 2 * self.lane_width + 2 * self.turn_setback + 1.0 > self.pitch:
            raise InvalidConfigError(f"pitch {self.pitch} too small for lane width {self.lane_width}")
        if self.n_traffic < 0 or self.image_size < 4 or self.dt <= 0 or self.lidar_beams < 1:
            raise InvalidConfigError(f"invalid world config {self}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.image_size, self.cell_size)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown world config keys: {sorted(unknown)}")
        d = dict(d)
        if "traffic_speed" in d:
            d["traffic_speed"] = tuple(d["traffic_speed"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RoadSegment:
    id: int
    start: tuple[float, float]
    end: tuple[float, float]
    start_node: int
    end_node: int
    lane_width: float

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.end, self.start)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class Intersection:
    id: int
    node: int
    center: tuple[float, float]
    segment_ids: tuple[int, ...]


@dataclass(eq=False)
class WorldMap:
    bounds: float
    lane_width: float
    street_xs: tuple[float, ...]  # x of north-south streets
    street_ys: tuple[float, ...]  # y of east-west streets
    margin: float
    turn_setback: float
    nodes: tuple[tuple[float, float], ...]
    road_segments: tuple[RoadSegment, ...]
    intersections: tuple[Intersection, ...]
    static_obstacles: tuple[OrientedBox, ...]
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    # ---- topology -------------------------------------------------------
    @property
    def n_lanes(self) -> int:
        return 2 * len(self.road_segments)

    def is_junction(self, node: int) -> bool:
        return self._node_degree()[node] >= 2

    def _node_degree(self):
        if "degree" not in self._cache:
            deg = [0] * len(self.nodes)
            for s in self.road_segments:
                deg[s.start_node] += 1
                deg[s.end_node] += 1
            self._cache["degree"] = deg
        return self._cache["degree"]

    def lane_nodes(self, lane: int) -> tuple[int, int]:
        seg = self.road_segments[lane // 2]
        return (seg.start_node, seg.end_node) if lane % 2 == 0 else (seg.end_node, seg.start_node)

    def lanes_from(self, node: int) -> list[int]:
        key = ("from", node)
        if key not in self._cache:
            self._cache[key] = [ln for ln in range(self.n_lanes) if self.lane_nodes(ln)[0] == node]
        return self._cache[key]

    def successors(self, lane: int) -> list[int]:
        """Lanes reachable at the end of ``lane``; a U-turn only at dead ends."""
        end = self.lane_nodes(lane)[1]
        reverse = lane ^ 1
        opts = [ln for ln in self.lanes_from(end) if ln != reverse]
        return opts or [reverse]

    # ---- geometry -------------------------------------------------------
    def lane_direction(self, lane: int) -> np.ndarray:
        d = self.road_segments[lane // 2].direction
        return d if lane % 2 == 0 else -d

    def lane_polyline(self, lane: int) -> np.ndarray:
        """Lane-centre polyline (2, 2), trimmed at junctions to leave room for turns."""
        key = ("lane", lane)
        if key in self._cache:
            return self._cache[key]
        a, b = self.lane_nodes(lane)
        d = self.lane_direction(lane)
        right = np.array([d[1], -d[0]])
        off = right * self.lane_width / 2.0
        trim = self.lane_width + self.turn_setback
        pa = np.array(self.nodes[a]) + off + (d * trim if self.is_junction(a) else 0.0)
        pb = np.array(self.nodes[b]) + off - (d * trim if self.is_junction(b) else 0.0)
        poly = np.stack([pa, pb])
        self._cache[key] = poly
        return poly

    def connector(self, src: int, dst: int, samples: int = 8) -> np.ndarray:
        """Cubic Bezier (samples+1, 2) from the end of lane ``src`` to the start of ``dst``."""
        key = ("conn", src, dst)
        if key in self._cache:
            return self._cache[key]
        p0 = self.lane_polyline(src)[-1]
        p3 = self.lane_polyline(dst)[0]
        d0, d1 = self.lane_direction(src), self.lane_direction(dst)
        chord = float(np.linalg.norm(p3 - p0))
        cosang = float(np.dot(d0, d1))
        k = 1 / 3 if cosang > 0.5 else (0.39 if cosang > -0.5 else 0.667)
        p1, p2 = p0 + d0 * k * chord, p3 - d1 * k * chord
        t = np.linspace(0.0, 1.0, samples + 1)[:, None]
        pts = (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3
        self._cache[key] = pts
        return pts

    def path(self, prev_lane: int | None, lane: int) -> "Path":
        key = ("path", prev_lane, lane)
        if key not in self._cache:
            if prev_lane is None:
                pts = self.lane_polyline(lane)
            else:
                pts = np.concatenate([self.connector(prev_lane, lane), self.lane_polyline(lane)[1:]])
            self._cache[key] = Path(pts)
        return self._cache[key]

    # ---- semantic queries (global frame, vectorised) ---------------------
    def drivable(self, pts: np.ndarray) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        w = self.lane_width
        lo, hi = self.margin - w, self.bounds - self.margin + w
        out = np.zeros(x.shape, dtype=bool)
        for sy in self.street_ys:
            out |= (np.abs(y - sy) <= w) & (x >= lo) & (x <= hi)
        for sx in self.street_xs:
            out |= (np.abs(x - sx) <= w) & (y >= lo) & (y <= hi)
            # curb fillets of radius turn_setback round off every junction corner
            r = self.turn_setback
            for sy in self.street_ys:
                ax, ay = np.abs(x - sx), np.abs(y - sy)
                corner = (ax <= w + r) & (ay <= w + r)
                out |= corner & (np.hypot(ax - (w + r), ay - (w + r)) >= r)
        return out

    def in_junction_box(self, pts: np.ndarray) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        w = self.lane_width
        out = np.zeros(x.shape, dtype=bool)
        for sx in self.street_xs:
            for sy in self.street_ys:
                out |= (np.abs(x - sx) <= w) & (np.abs(y - sy) <= w)
        return out

    def center_marking(self, pts: np.ndarray, half_width: float = 0.2) -> np.ndarray:
        x, y = pts[..., 0], pts[..., 1]
        lo, hi = self.margin, self.bounds - self.margin
        out = np.zeros(x.shape, dtype=bool)
        for sy in self.street_ys:
            out |= (np.abs(y - sy) <= half_width) & (x >= lo) & (x <= hi)
        for sx in self.street_xs:
            out |= (np.abs(x - sx) <= half_width) & (y >= lo) & (y <= hi)
        return out & ~self.in_junction_box(pts)

    def stop_lines(self, pts: np.ndarray, depth: float = 0.6) -> np.ndarray:
        """Stop bars across every lane that enters a junction."""
        x, y = pts[..., 0], pts[..., 1]
        w = self.lane_width
        out = np.zeros(x.shape, dtype=bool)
        for sx in self.street_xs:
            for sy in self.street_ys:
                # eastbound lane (south half) / westbound lane (north half)
                out |= (x >= sx - w - depth) & (x < sx - w) & (y >= sy - w) & (y < sy)
                out |= (x > sx + w) & (x <= sx + w + depth) & (y > sy) & (y <= sy + w)
                # northbound lane (east half) / southbound lane (west half)
                out |= (y >= sy - w - depth) & (y < sy - w) & (x > sx) & (x <= sx + w)
                out |= (y > sy + w) & (y <= sy + w + depth) & (x >= sx - w) & (x < sx)
        return out

    # ---- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "bounds": self.bounds,
            "lane_width": self.lane_width,
            "street_xs": list(self.street_xs),
            "street_ys": list(self.street_ys),
            "margin": self.margin,
            "turn_setback": self.turn_setback,
            "seed": self.seed,
            "nodes": [list(n) for n in self.nodes],
            "road_segments": [asdict(s) for s in self.road_segments],
            "intersections": [asdict(i) for i in self.intersections],
            "static_obstacles": [asdict(b) for b in self.static_obstacles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def identifier(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


class Path:
    """Arc-length parametrised polyline."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.seg_dir = seg / np.maximum(self.seg_len, 1e-12)[:, None]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def at(self, s: float) -> tuple[float, float, float]:
        """(x, y, yaw) at arc length ``s`` (clamped to the path)."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        p = self.points[i] + self.seg_dir[i] * (s - self.cum[i])
        d = self.seg_dir[i]
        return float(p[0]), float(p[1]), math.atan2(d[1], d[0])

    def project(self, xy, s_lo: float, s_hi: float) -> float:
        """Arc length of the closest point to ``xy`` restricted to [s_lo, s_hi]."""
        a = self.points[:-1]
        t = np.einsum("ij,ij->i", np.asarray(xy) - a, self.seg_dir)
        t = np.clip(t, 0.0, self.seg_len)
        s = np.clip(self.cum[:-1] + t, s_lo, s_hi)
        best, best_d = s_lo, math.inf
        for si in s:
            x, y, _ = self.at(float(si))
            d = (x - xy[0]) ** 2 + (y - xy[1]) ** 2
            if d < best_d:
                best, best_d = float(si), d
        return best


def street_positions(cfg: WorldConfig) -> tuple[float, ...]:
    n = int(math.floor(cfg.bounds / cfg.pitch + 1e-9)) - 1
    return tuple(float(k * cfg.pitch) for k in range(1, n + 1))


def build_world(seed: int, config: WorldConfig) -> WorldMap:
    if config.bounds < 2 * config.pitch:
        raise InvalidConfigError(f"bounds {config.bounds} must be >= 2 x pitch {config.pitch}")
    w = config.lane_width
    margin = 2.0 * w
    xs = street_positions(config)
    ys = xs
    n = len(xs)
    nodes: list[tuple[float, float]] = []
    grid_node = {}
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            grid_node[i, j] = len(nodes)
            nodes.append((x, y))
    segments: list[RoadSegment] = []

    def add_street(chain):
        for a, b in zip(chain[:-1], chain[1:]):
            segments.append(RoadSegment(len(segments), nodes[a], nodes[b], a, b, w))

    for j, y in enumerate(ys):
        west, east = len(nodes), len(nodes) + 1
        nodes += [(margin, y), (config.bounds - margin, y)]
        add_street([west] + [grid_node[i, j] for i in range(n)] + [east])
    for i, x in enumerate(xs):
        south, north = len(nodes), len(nodes) + 1
        nodes += [(x, margin), (x, config.bounds - margin)]
        add_street([south] + [grid_node[i, j] for j in range(n)] + [north])

    intersections = []
    for (i, j), node in sorted(grid_node.items()):
        segs = tuple(s.id for s in segments if node in (s.start_node, s.end_node))
        intersections.append(Intersection(len(intersections), node, nodes[node], segs))

    obstacles = _place_buildings(np.random.default_rng(seed), config, xs)
    return WorldMap(
        bounds=float(config.bounds),
        lane_width=float(w),
        street_xs=xs,
        street_ys=ys,
        margin=margin,
        turn_setback=float(config.turn_setback),
        nodes=tuple(nodes),
        road_segments=tuple(segments),
        intersections=tuple(intersections),
        static_obstacles=tuple(obstacles),
        seed=int(seed),
    )


def _place_buildings(rng: np.random.Generator, cfg: WorldConfig, streets) -> list[OrientedBox]:
    """Random axis-aligned buildings; each block is split 2x2 and each quarter may hold one."""
    off = cfg.lane_width + cfg.building_setback
    edges = [0.0] + [e for s in streets for e in (s - off, s + off)] + [cfg.bounds]
    intervals = [(edges[k], edges[k + 1]) for k in range(0, len(edges), 2)]
    boxes = []
    for x0, x1 in intervals:
        for y0, y1 in intervals:
            xm, ym = (x0 + x1) / 2, (y0 + y1) / 2
            for qx0, qx1 in ((x0, xm), (xm, x1)):
                for qy0, qy1 in ((y0, ym), (ym, y1)):
                    fill = rng.uniform(0.4, 0.9, size=2)
                    keep = rng.uniform() < 0.7
                    if not keep:
                        continue
                    sx, sy = (qx1 - qx0) * fill[0], (qy1 - qy0) * fill[1]
                    if sx < 1.0 or sy < 1.0:
                        continue
                    cx = rng.uniform(qx0 + sx / 2, qx1 - sx / 2)
                    cy = rng.uniform(qy0 + sy / 2, qy1 - sy / 2)
                    boxes.append(OrientedBox.make(cx, cy, 0.0, sx, sy))
    return boxes
