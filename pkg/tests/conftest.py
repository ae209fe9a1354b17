import dataclasses

import numpy as np
import pytest

from drivepercept.geometry import GridSpec, wrap_angle
from drivepercept.latentmodel import ModelConfig
from drivepercept.worldsim import Route, VehicleState, WorldConfig, WorldState, build_world, generate_episode

TINY_WORLD = WorldConfig(image_size=16, cell_size=2.0, n_traffic=8)
TINY_MODEL = dict(width=0.125, hidden=32, feature_dim=32, latent1_dim=4, latent2_dim=8)


def make_vehicle(x, y, yaw, speed=0.0, length=4.5, width=2.0):
    return VehicleState(x, y, wrap_angle(yaw), speed, length, width, Route(None, 0, 0, 0.0), 0, 0.0)


def make_state(world, ego, traffic=(), config=None):
    return WorldState(world, config or WorldConfig(), ego, tuple(traffic))


def without_obstacles(world):
    return dataclasses.replace(world, static_obstacles=(), _cache={})


@pytest.fixture(scope="session")
def world():
    return build_world(7, WorldConfig())


@pytest.fixture(scope="session")
def empty_world(world):
    return without_obstacles(world)


@pytest.fixture(scope="session")
def tiny_world():
    return build_world(3, TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_episodes(tiny_world):
    return [generate_episode(tiny_world, s, 8, TINY_WORLD) for s in range(6)]


@pytest.fixture
def tiny_model_config():
    return ModelConfig(image_size=16, **TINY_MODEL)


@pytest.fixture
def grid64():
    return GridSpec(64, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Record one acceptance line; returns ``passed`` so callers can assert on it."""

    def _record(number, name, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "UNVERIFIED"}[passed]
        ACCEPTANCE[number] = f"criterion {number} [{status}] {name}" + (f": {detail}" if detail else "")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
