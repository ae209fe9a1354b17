"""Episode generation: spawn traffic, drive the ego, render every frame."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..geometry import OrientedBox
from .dynamics import EgoAction, Route, VehicleState, WorldState, choose_lane, lane_follow_action, step_world
from .render import ground_truth_boxes, render_camera, render_lidar_bev, render_roadmap, to_float
from .world import WorldConfig, WorldMap

SPAWN_SEPARATION = 8.0
SPAWN_ATTEMPTS = 500
EGO_SIZE = (4.5, 2.0)

_PI32_BELOW = float(np.nextafter(np.float32(math.pi), np.float32(0.0)))


class EpisodeGenerationError(RuntimeError):
    pass


@dataclass
class ObservationFrame:
    camera: np.ndarray  # (H, W, 3) float32 in [0, 1]
    lidar_bev: np.ndarray
    roadmap: np.ndarray
    ego_pose: np.ndarray  # (3,) float32: x, y, yaw (global)
    gt_boxes: list[OrientedBox] = field(default_factory=list)


@dataclass
class Episode:
    frames: list[ObservationFrame]
    actions: list[EgoAction]
    seed: int
    world_ref: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.actions) != len(self.frames) - 1:
            raise ValueError(f"{len(self.frames)} frames need {len(self.frames) - 1} actions, got {len(self.actions)}")

    def __len__(self):
        return len(self.frames)

    def truncated(self, n: int) -> "Episode":
        return Episode(self.frames[:n], self.actions[: n - 1], self.seed, self.world_ref, dict(self.meta))


def f32(v: float) -> float:
    return float(np.float32(v))


def f32_angle(a: float) -> float:
    """Round an angle to float32 while staying inside (-pi, pi]."""
    r = f32(a)
    if r > math.pi:
        return _PI32_BELOW
    if r <= -math.pi:
        return -_PI32_BELOW
    return r


def f32_box(b: OrientedBox) -> OrientedBox:
    return OrientedBox(f32(b.cx), f32(b.cy), f32_angle(b.heading), f32(b.length), f32(b.width), f32(b.score))


def _vehicle_on_lane(world: WorldMap, lane: int, s: float, behavior_seed: int, size, target: float, speed: float, ego=False):
    route = Route(None, lane, choose_lane(world, lane, behavior_seed, 0, avoid_dead_ends=ego), s, 0)
    x, y, yaw = world.path(None, lane).at(s)
    return VehicleState(x, y, yaw, speed, size[0], size[1], route, behavior_seed, target)


def spawn(world: WorldMap, config: WorldConfig, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    placed: list[VehicleState] = []

    def sample(size, target, speed, ego=False):
        for _ in range(SPAWN_ATTEMPTS):
            lane = int(rng.integers(world.n_lanes))
            length = world.path(None, lane).length
            if length < 2.0:
                continue
            s = float(rng.uniform(0.0, length))
            bseed = int(rng.integers(2**31 - 1))
            v = _vehicle_on_lane(world, lane, s, bseed, size, target, speed, ego)
            if ego and not world.is_junction(world.lane_nodes(lane)[1]):
                continue
            if all(math.hypot(v.x - o.x, v.y - o.y) >= SPAWN_SEPARATION for o in placed):
                placed.append(v)
                return v
        raise EpisodeGenerationError(f"no free lane position to spawn a vehicle (seed={seed})")

    ego = sample(EGO_SIZE, config.ego_target_speed, 0.5 * config.ego_target_speed, ego=True)
    traffic = []
    for _ in range(config.n_traffic):
        length = float(rng.uniform(4.0, 5.0))
        width = float(rng.uniform(1.8, 2.1))
        target = float(rng.uniform(*config.traffic_speed))
        traffic.append(sample((length, width), target, target))
    return WorldState(world, config, ego, tuple(traffic), 0)


def render_frame(state: WorldState) -> ObservationFrame:
    grid = state.config.grid
    e = state.ego
    return ObservationFrame(
        camera=to_float(render_camera(state)),
        lidar_bev=to_float(render_lidar_bev(state, grid)),
        roadmap=to_float(render_roadmap(state, grid)),
        ego_pose=np.array([e.x, e.y, f32_angle(e.yaw)], dtype=np.float32),
        gt_boxes=[f32_box(b) for b in ground_truth_boxes(state, grid)],
    )


def generate_episode(world: WorldMap, seed: int, length: int, config: WorldConfig | None = None) -> Episode:
    if length < 2:
        raise ValueError(f"episode length must be >= 2, got {length}")
    config = config or WorldConfig()
    state = spawn(world, config, seed)
    frames, actions = [], []
    for t in range(length):
        frames.append(render_frame(state))
        if t == length - 1:
            break
        action = lane_follow_action(state)
        action = EgoAction(f32(action.steer), f32(action.accel))
        actions.append(action)
        state = step_world(state, action, config.dt)
    meta = {"world_seed": world.seed, "bounds": world.bounds, "dt": config.dt}
    return Episode(frames, actions, int(seed), world.identifier, meta)


def _gen_job(args):
    world, seed, length, config = args
    return generate_episode(world, seed, length, config)


def generate_episodes(world: WorldMap, seeds, length: int, config: WorldConfig, workers: int = 1) -> list[Episode]:
    """Generate one episode per seed; independent jobs, optionally in worker processes."""
    jobs = [(world, int(s), length, config) for s in seeds]
    if workers <= 1:
        return [_gen_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_gen_job, jobs))
