"""Vehicle state, ego bicycle dynamics, traffic lane following."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import OrientedBox, wrap_angle
from .world import Path, WorldConfig, WorldMap

WHEELBASE = 2.7
MAX_STEER = 0.6  # rad at |steer| = 1
MAX_ACCEL = 3.0  # m/s^2 at accel = +1
MAX_BRAKE = 6.0  # m/s^2 at accel = -1
LEADER_RANGE = 20.0
MIN_GAP = 6.0


@dataclass(frozen=True)
class EgoAction:
    steer: float = 0.0
    accel: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", float(min(max(self.steer, -1.0), 1.0)))
        object.__setattr__(self, "accel", float(min(max(self.accel, -1.0), 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel])


@dataclass(frozen=True)
class Route:
    """Position along the lane graph.

    ``s`` is arc length along ``world.path(prev_lane, lane)``; ``next_lane`` is
    decided on entering ``lane``.  ``decisions`` counts turn choices so far and
    indexes the behaviour random stream.
    """

    prev_lane: int | None
    lane: int
    next_lane: int
    s: float
    decisions: int = 0


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    speed: float
    length: float
    width: float
    route: Route
    behavior_seed: int
    target_speed: float

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)

    def box(self) -> OrientedBox:
        return OrientedBox(self.x, self.y, self.yaw, self.length, self.width)


@dataclass(frozen=True)
class WorldState:
    world: WorldMap
    config: WorldConfig
    ego: VehicleState
    traffic: tuple[VehicleState, ...]
    step: int = 0

    @property
    def vehicles(self) -> tuple[VehicleState, ...]:
        return (self.ego,) + self.traffic


def choose_lane(world: WorldMap, lane: int, behavior_seed: int, decision: int, avoid_dead_ends: bool = False) -> int:
    opts = world.successors(lane)
    if avoid_dead_ends:
        through = [o for o in opts if world.is_junction(world.lane_nodes(o)[1])]
        opts = through or opts
    if len(opts) == 1:
        return opts[0]
    k = np.random.default_rng([behavior_seed, decision]).integers(len(opts))
    return opts[int(k)]


def advance_route(world: WorldMap, route: Route, s_new: float, behavior_seed: int, avoid_dead_ends=False) -> Route:
    """Move along the route to arc length ``s_new``, rolling over onto successor lanes."""
    while True:
        length = world.path(route.prev_lane, route.lane).length
        if s_new < length:
            return replace(route, s=s_new)
        d = route.decisions + 1
        nxt = choose_lane(world, route.next_lane, behavior_seed, d, avoid_dead_ends)
        route = Route(route.lane, route.next_lane, nxt, 0.0, d)
        s_new -= length


def route_point(world: WorldMap, route: Route, s: float) -> tuple[float, float, float]:
    """Pose at arc length ``s`` along the current path, continuing into the next one."""
    path = world.path(route.prev_lane, route.lane)
    if s <= path.length:
        return path.at(s)
    return world.path(route.lane, route.next_lane).at(s - path.length)


def _leader_gaps(vehicles) -> np.ndarray:
    """Distance to the nearest vehicle ahead in lane for each vehicle (inf if none)."""
    pos = np.array([[v.x, v.y] for v in vehicles])
    yaw = np.array([v.yaw for v in vehicles])
    d = pos[None, :, :] - pos[:, None, :]
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    lon = c * d[..., 0] + s * d[..., 1]
    lat = -s * d[..., 0] + c * d[..., 1]
    ahead = (lon > 0.1) & (lon < LEADER_RANGE) & (np.abs(lat) < 2.0)
    np.fill_diagonal(ahead, False)
    gaps = np.where(ahead, lon, np.inf)
    return gaps.min(axis=1)


def desired_speed(target: float, gap: float) -> float:
    if not math.isfinite(gap):
        return target
    return min(target, max(0.0, (gap - MIN_GAP) / 1.5))


def bicycle_step(x, y, yaw, speed, action: EgoAction, dt: float, v_max: float):
    """Explicit-Euler kinematic bicycle step; speed clamped to [0, v_max]."""
    delta = action.steer * MAX_STEER
    nx = x + speed * math.cos(yaw) * dt
    ny = y + speed * math.sin(yaw) * dt
    nyaw = wrap_angle(yaw + speed / WHEELBASE * math.tan(delta) * dt)
    acc = action.accel * (MAX_ACCEL if action.accel >= 0 else MAX_BRAKE)
    nspeed = min(max(speed + acc * dt, 0.0), v_max)
    return nx, ny, nyaw, nspeed


def step_world(state: WorldState, ego_action: EgoAction, dt: float) -> WorldState:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    world, cfg = state.world, state.config
    gaps = _leader_gaps(state.vehicles)

    ego = state.ego
    nx, ny, nyaw, nspeed = bicycle_step(ego.x, ego.y, ego.yaw, ego.speed, ego_action, dt, cfg.v_max)
    # keep the ego's route progress in step with its actual position
    route = ego.route
    path = world.path(route.prev_lane, route.lane)
    nxt = world.path(route.lane, route.next_lane)
    joined = np.concatenate([path.points, nxt.points[1:]])
    s_new = Path(joined).project((nx, ny), route.s - 0.5, route.s + ego.speed * dt + 2.0)
    new_route = advance_route(world, route, max(s_new, route.s), ego.behavior_seed, avoid_dead_ends=True)
    new_ego = replace(ego, x=nx, y=ny, yaw=nyaw, speed=nspeed, route=new_route)

    new_traffic = []
    for k, v in enumerate(state.traffic):
        vd = desired_speed(v.target_speed, gaps[k + 1])
        sp = v.speed + float(np.clip(vd - v.speed, -MAX_BRAKE * dt, MAX_ACCEL * dt))
        sp = min(max(sp, 0.0), cfg.v_max)
        r = advance_route(world, v.route, v.route.s + sp * dt, v.behavior_seed)
        px, py, pyaw = world.path(r.prev_lane, r.lane).at(r.s)
        new_traffic.append(replace(v, x=px, y=py, yaw=wrap_angle(pyaw), speed=sp, route=r))
    return replace(state, ego=new_ego, traffic=tuple(new_traffic), step=state.step + 1)


def lane_follow_action(state: WorldState) -> EgoAction:
    """Scripted ego driver: pure-pursuit steering, speed tracking with leader braking."""
    ego, world = state.ego, state.world
    lookahead = max(4.0, 0.8 * ego.speed)
    tx, ty, _ = route_point(world, ego.route, ego.route.s + lookahead)
    dx, dy = tx - ego.x, ty - ego.y
    alpha = math.atan2(dy, dx) - ego.yaw
    ld = max(math.hypot(dx, dy), 1e-3)
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), ld)
    steer = delta / MAX_STEER

    target = ego.target_speed
    # slow down for turns ahead
    turn = abs(wrap_angle(route_point(world, ego.route, ego.route.s + 12.0)[2] - ego.yaw))
    if turn > 0.4:
        target = min(target, 4.0)
    gap = _leader_gaps(state.vehicles)[0]
    vd = desired_speed(target, gap)
    accel = (vd - ego.speed) / (MAX_ACCEL * 0.5)
    return EgoAction(steer, accel)
