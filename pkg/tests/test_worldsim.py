import dataclasses
import math

import numpy as np
import pytest
import shapely
import shapely.geometry as sg
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_state, make_vehicle, without_obstacles
from drivepercept.geometry import OrientedBox, se2_apply, se2_inverse_apply, wrap_angle
from drivepercept.worldsim import (
    EgoAction,
    EpisodeGenerationError,
    InvalidConfigError,
    WorldConfig,
    build_world,
    generate_episode,
    ground_truth_boxes,
    lane_follow_action,
    render_camera,
    render_lidar_bev,
    render_roadmap,
    spawn,
    step_world,
)
from drivepercept.worldsim import render as R
from drivepercept.worldsim.dynamics import bicycle_step

# mid-block on the east-west street y = 50, in the eastbound (south) lane,
# offset so no cell centre sits exactly on a road edge
EGO_XY = (75.1, 48.35)


class TestBuildWorld:
    def test_seed7_grid(self, world):
        cfg = WorldConfig()
        # streets at every multiple of the pitch strictly inside the bounds
        streets = [k * cfg.pitch for k in range(1, 10) if 0 < k * cfg.pitch < cfg.bounds]
        assert len(world.street_xs) == len(world.street_ys) == len(streets) == 3
        crossings = {(x, y) for x in streets for y in streets}
        assert len(world.intersections) == 9
        assert {tuple(i.center) for i in world.intersections} == crossings

    def test_deterministic_bytes(self):
        a, b = build_world(7, WorldConfig()), build_world(7, WorldConfig())
        assert a.to_json() == b.to_json()
        assert a.identifier == b.identifier
        assert build_world(8, WorldConfig()).to_json() != a.to_json()

    def test_invalid_bounds(self):
        with pytest.raises(InvalidConfigError):
            build_world(0, WorldConfig(bounds=10.0, pitch=50.0))

    def test_unknown_config_key(self):
        with pytest.raises(InvalidConfigError):
            WorldConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("seed", [0, 7, 99])
    def test_invariants(self, seed):
        w = build_world(seed, WorldConfig())
        ids = {s.id for s in w.road_segments}
        for inter in w.intersections:
            assert len(inter.segment_ids) >= 2 and set(inter.segment_ids) <= ids
        assert w.lane_width > 2.2
        for s in w.road_segments:
            for p in (s.start, s.end):
                assert 0 <= p[0] <= w.bounds and 0 <= p[1] <= w.bounds
        for o in w.static_obstacles:
            c = o.corners()
            assert c.min() >= 0 and c.max() <= w.bounds
            # buildings never cover a road
            assert not w.drivable(c).any()
            assert not w.drivable(np.array([[o.cx, o.cy]])).any()


class TestDynamics:
    def test_fixed_point(self):
        assert bicycle_step(3.0, 4.0, 0.5, 0.0, EgoAction(0.0, 0.0), 0.1, 15.0) == (3.0, 4.0, 0.5, 0.0)

    @given(st.floats(-math.pi, math.pi))
    def test_straight_displacement(self, yaw):
        yaw = wrap_angle(yaw)
        x, y, nyaw, v = bicycle_step(10.0, 20.0, yaw, 5.0, EgoAction(0.0, 0.0), 0.1, 15.0)
        assert math.hypot(x - 10.0, y - 20.0) == pytest.approx(0.5, abs=1e-12)
        assert math.atan2(y - 20.0, x - 10.0) == pytest.approx(yaw, abs=1e-9) or abs(abs(yaw) - math.pi) < 1e-9
        assert nyaw == yaw and v == 5.0

    def test_action_clamped(self):
        a = EgoAction(3.0, -7.0)
        assert (a.steer, a.accel) == (1.0, -1.0)

    def test_speed_bounds(self):
        assert bicycle_step(0, 0, 0, 14.9, EgoAction(0, 1), 1.0, 15.0)[3] == 15.0
        assert bicycle_step(0, 0, 0, 0.1, EgoAction(0, -1), 1.0, 15.0)[3] == 0.0

    def test_step_world_deterministic(self, world):
        s = spawn(world, WorldConfig(), 5)
        a = lane_follow_action(s)
        s1, s2 = step_world(s, a, 0.1), step_world(s, a, 0.1)
        assert s1 == s2

    def test_step_world_plain_ego_motion(self, world):
        s = spawn(world, WorldConfig(), 5)
        ego = dataclasses.replace(s.ego, speed=5.0)
        s = dataclasses.replace(s, ego=ego)
        n = step_world(s, EgoAction(0.0, 0.0), 0.1)
        assert math.hypot(n.ego.x - ego.x, n.ego.y - ego.y) == pytest.approx(0.5)
        assert n.ego.yaw == ego.yaw

    def test_bad_dt(self, world):
        with pytest.raises(ValueError):
            step_world(spawn(world, WorldConfig(), 1), EgoAction(), 0.0)

    def test_long_rollout_stays_on_map(self, world):
        cfg = WorldConfig()
        s = spawn(world, cfg, 11)
        for _ in range(600):
            s = step_world(s, lane_follow_action(s), cfg.dt)
            for v in s.vehicles:
                assert 0 <= v.x <= cfg.bounds and 0 <= v.y <= cfg.bounds
                assert 0 <= v.speed <= cfg.v_max
                assert -math.pi < v.yaw <= math.pi
            assert world.drivable(np.array([[v.x, v.y] for v in s.vehicles])).all()


def lidar_state(world, traffic=(), obstacles=None):
    w = without_obstacles(world) if obstacles is None else dataclasses.replace(world, static_obstacles=tuple(obstacles), _cache={})
    ego = make_vehicle(*EGO_XY, 0.0)
    return make_state(w, ego, traffic)


class TestLidar:
    def test_empty_world_no_red(self, empty_world, grid64):
        img = render_lidar_bev(lidar_state(empty_world), grid64)
        assert img.dtype == np.uint8 and img.shape == (64, 64, 3)
        assert not img[..., 0].any()
        assert img[..., 1].any()

    def test_green_only_on_road(self, empty_world, grid64):
        s = lidar_state(empty_world)
        img = render_lidar_bev(s, grid64)
        centers = se2_apply(s.ego.pose, grid64.cell_centers())
        g = img[..., 1] > 0
        # green cells lie on road up to half a cell of discretisation
        near_road = np.abs(centers[..., 1] - 50.0) <= 3.5 + 0.5
        assert np.all(near_road[g])

    def test_near_face_cells(self, empty_world, grid64):
        car = make_vehicle(EGO_XY[0] + 10.0, EGO_XY[1], 0.0, length=4.5, width=1.9)
        img = render_lidar_bev(lidar_state(empty_world, [car]), grid64)
        red = np.argwhere(img[..., 0] > 0)
        centers = grid64.cell_centers()[red[:, 0], red[:, 1]]
        # first-hit oracle: rays reach only the rear face x = 7.75, |y| <= 0.95
        expect = {(7.75, y) for y in (-0.75, -0.25, 0.25, 0.75)}
        assert {tuple(np.round(c, 6)) for c in centers} == expect

    def test_hidden_behind_wall(self, empty_world, grid64):
        wall = OrientedBox(EGO_XY[0] + 6.0, EGO_XY[1] + 20.0, math.pi / 2, 60.0, 0.5)
        car = make_vehicle(EGO_XY[0] + 10.0, EGO_XY[1], 0.0)
        s = lidar_state(empty_world, [car], [wall])
        img = render_lidar_bev(s, grid64)
        local_car = dataclasses.replace(car.box(), cx=10.0, cy=0.0)
        footprint = shapely.covers(sg.Polygon(local_car.corners()).buffer(0.5), shapely.points(grid64.cell_centers().reshape(-1, 2)))
        assert img[..., 0].reshape(-1)[footprint].sum() == 0
        assert img[..., 0].any()  # the wall itself is seen

    def test_occlusion_soundness(self, world, grid64):
        cfg = WorldConfig()
        s = spawn(world, cfg, 21)
        checked = 0
        for step in range(40):
            img = render_lidar_bev(s, grid64)
            polys = [sg.Polygon(se2_inverse_apply(s.ego.pose, b.corners())) for b in [v.box() for v in s.traffic] + list(world.static_obstacles)]
            polys = [p for p in polys if p.distance(sg.Point(0, 0)) < 30]
            h = grid64.cell_size / 2
            for r, c in np.argwhere(img[..., 0] > 0):
                cx, cy = grid64.cell_centers()[r, c]
                seg = sg.LineString([(0, 0), (cx, cy)])
                cell = sg.box(cx - h, cy - h, cx + h, cy + h).buffer(1e-6)
                for p in polys:
                    inter = seg.intersection(p)
                    assert inter.is_empty or cell.covers(inter), (step, r, c)
                checked += 1
            s = step_world(s, lane_follow_action(s), cfg.dt)
        assert checked > 100


class TestRoadmap:
    def test_two_bands(self, empty_world, grid64):
        s = lidar_state(empty_world)
        img = render_roadmap(s, grid64)
        # rasterisation oracle: road where |y - 50| < 3.5, centre line where |y - 50| <= 0.2
        gy = EGO_XY[1] + grid64.cell_centers()[0, :, 1]
        road = np.abs(gy - 50.0) < 3.5
        mark = np.abs(gy - 50.0) <= 0.2
        expect = np.zeros((64, 3), dtype=np.uint8)
        expect[road] = R.RM_ROAD
        expect[mark] = R.RM_MARKING
        np.testing.assert_array_equal(img, np.broadcast_to(expect, img.shape))
        # two drivable bands either side of one marking run
        labels = np.diff(np.r_[0, (road & ~mark).astype(int), 0])
        assert (labels == 1).sum() == 2
        assert mark.sum() >= 1 and abs(grid64.cell_centers()[0, int(np.flatnonzero(mark)[0]), 1]) < 16

    def test_rotate_180(self, world, grid64):
        a = make_state(world, make_vehicle(*EGO_XY, 0.0))
        b = make_state(world, make_vehicle(*EGO_XY, math.pi))
        np.testing.assert_array_equal(render_roadmap(b, grid64), np.rot90(render_roadmap(a, grid64), 2))

    def test_off_road_background(self, world, grid64):
        s = make_state(world, make_vehicle(*EGO_XY, 0.0))
        img = render_roadmap(s, grid64)
        pts = se2_apply(s.ego.pose, grid64.cell_centers())
        off = ~world.drivable(pts)
        assert off.any()
        assert np.all(img[off] == R.RM_BACKGROUND)

    def test_palette_closed(self, world, grid64):
        s = spawn(world, WorldConfig(), 3)
        for _ in range(30):
            img = render_roadmap(s, grid64)
            colors = {tuple(c) for c in img.reshape(-1, 3)}
            assert colors <= {R.RM_BACKGROUND, R.RM_ROAD, R.RM_MARKING, R.RM_STOP, R.RM_JUNCTION}
            s = step_world(s, lane_follow_action(s), 0.1)


def _vehicle_pixels(img):
    return int(np.all(img == R.CAM_VEHICLE, axis=-1).sum())


class TestCamera:
    def test_palette_empty_road(self, empty_world):
        img = render_camera(lidar_state(empty_world))
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert colors <= {R.CAM_SKY, R.CAM_GROUND, R.CAM_ROAD, R.CAM_MARKING, R.CAM_STOP}
        assert R.CAM_ROAD in colors

    def test_nearer_vehicle_larger(self, empty_world):
        near = render_camera(lidar_state(empty_world, [make_vehicle(EGO_XY[0] + 5.0, EGO_XY[1], 0.0)]))
        far = render_camera(lidar_state(empty_world, [make_vehicle(EGO_XY[0] + 20.0, EGO_XY[1], 0.0)]))
        assert _vehicle_pixels(near) > _vehicle_pixels(far) > 0

    def test_deterministic(self, world):
        s = spawn(world, WorldConfig(), 4)
        np.testing.assert_array_equal(render_camera(s), render_camera(s))


class TestGroundTruthBoxes:
    def test_no_traffic(self, world, grid64):
        assert ground_truth_boxes(make_state(world, make_vehicle(*EGO_XY, 0.0)), grid64) == []

    def test_se2_example(self, world, grid64):
        ego = make_vehicle(100.0, 75.0, math.pi / 2)
        car = make_vehicle(110.0, 75.0, 0.3)
        (b,) = ground_truth_boxes(make_state(world, ego, [car]), grid64)
        assert (b.cx, b.cy) == pytest.approx((0.0, -10.0), abs=1e-12)
        assert b.heading == pytest.approx(0.3 - math.pi / 2, abs=1e-12)

    def test_out_of_range(self, world, grid64):
        ego = make_vehicle(100.0, 75.0, 0.0)
        assert ground_truth_boxes(make_state(world, ego, [make_vehicle(117.0, 75.0, 0.0)]), grid64) == []

    def test_frame_consistency(self, world, grid64):
        s = spawn(world, WorldConfig(), 8)
        found = 0
        for _ in range(50):
            boxes = ground_truth_boxes(s, grid64)
            inside = [v for v in s.traffic if grid64.contains(*se2_inverse_apply(s.ego.pose, np.array([v.x, v.y])))]
            assert len(boxes) == len(inside)
            for b, v in zip(boxes, inside):
                gx, gy = se2_apply(s.ego.pose, np.array([b.cx, b.cy]))
                assert abs(gx - v.x) < 1e-9 and abs(gy - v.y) < 1e-9
                assert abs(wrap_angle(b.heading + s.ego.yaw - v.yaw)) < 1e-9
                found += 1
            s = step_world(s, lane_follow_action(s), 0.1)
        assert found > 0


class TestEpisodes:
    def test_alignment(self, tiny_world):
        from conftest import TINY_WORLD

        ep = generate_episode(tiny_world, 1, 10, TINY_WORLD)
        assert len(ep.frames) == 10 and len(ep.actions) == 9

    def test_bit_identical(self, tiny_world):
        from conftest import TINY_WORLD

        a, b = generate_episode(tiny_world, 4, 6, TINY_WORLD), generate_episode(tiny_world, 4, 6, TINY_WORLD)
        assert a.actions == b.actions
        for fa, fb in zip(a.frames, b.frames):
            for k in ("camera", "lidar_bev", "roadmap", "ego_pose"):
                assert getattr(fa, k).tobytes() == getattr(fb, k).tobytes()
            assert fa.gt_boxes == fb.gt_boxes

    def test_no_traffic(self, world):
        cfg = WorldConfig(n_traffic=0, image_size=16, cell_size=2.0)
        ep = generate_episode(world, 2, 5, cfg)
        assert all(f.gt_boxes == [] for f in ep.frames)

    def test_spawn_failure_names_seed(self):
        cfg = WorldConfig(bounds=100.0, pitch=50.0, n_traffic=400)
        with pytest.raises(EpisodeGenerationError, match="seed=77"):
            generate_episode(build_world(0, cfg), 77, 3, cfg)

    def test_length_too_short(self, tiny_world):
        with pytest.raises(ValueError):
            generate_episode(tiny_world, 0, 1)

    def test_frame_contracts(self, world):
        cfg = WorldConfig()
        ep = generate_episode(world, 31, 30, cfg)
        grid = cfg.grid
        for f in ep.frames:
            for img in (f.camera, f.lidar_bev, f.roadmap):
                assert img.shape == (64, 64, 3) and img.dtype == np.float32
                assert img.min() >= 0.0 and img.max() <= 1.0
            assert -math.pi < f.ego_pose[2] <= math.pi
            for b in f.gt_boxes:
                assert grid.contains(b.cx, b.cy)
                assert -math.pi < b.heading <= math.pi
        for a in ep.actions:
            assert -1.0 <= a.steer <= 1.0 and -1.0 <= a.accel <= 1.0

    def test_parallel_matches_serial(self, tiny_world):
        from conftest import TINY_WORLD
        from drivepercept.worldsim import generate_episodes

        ser = generate_episodes(tiny_world, [1, 2], 4, TINY_WORLD, workers=1)
        par = generate_episodes(tiny_world, [1, 2], 4, TINY_WORLD, workers=2)
        for a, b in zip(ser, par):
            assert a.actions == b.actions
            np.testing.assert_array_equal(np.stack([f.camera for f in a.frames]), np.stack([f.camera for f in b.frames]))
