"""Synthetic grid-town driving world: map, dynamics, sensors, episodes, datasets."""

from .dataset import DatasetFormatError, read_dataset, read_episode, write_dataset, write_episode
from .dynamics import EgoAction, Route, VehicleState, WorldState, lane_follow_action, step_world
from .episode import Episode, EpisodeGenerationError, ObservationFrame, generate_episode, generate_episodes, spawn
from .render import ground_truth_boxes, render_camera, render_lidar_bev, render_roadmap
from .world import InvalidConfigError, WorldConfig, WorldMap, build_world

__all__ = [
    "DatasetFormatError",
    "EgoAction",
    "Episode",
    "EpisodeGenerationError",
    "InvalidConfigError",
    "ObservationFrame",
    "Route",
    "VehicleState",
    "WorldConfig",
    "WorldMap",
    "WorldState",
    "build_world",
    "generate_episode",
    "generate_episodes",
    "ground_truth_boxes",
    "lane_follow_action",
    "read_dataset",
    "read_episode",
    "render_camera",
    "render_lidar_bev",
    "render_roadmap",
    "spawn",
    "step_world",
    "write_dataset",
    "write_episode",
]
