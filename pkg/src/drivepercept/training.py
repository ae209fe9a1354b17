"""Sequence ELBO and the stochastic-gradient training loop."""

from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .geometry import GridSpec, OrientedBox
from .latentmodel import (
    ContractError,
    LatentModel,
    ModelConfig,
    kl_divergence,
    log_likelihood_detection,
    log_likelihood_image,
    log_likelihood_pose,
    pose_target,
    sample_gaussian,
    save_checkpoint,
)
from .maskcodec import encode_boxes
from .worldsim.dataset import dataset_episode_dirs, read_episode_arrays
from .worldsim.episode import Episode

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_input_recon", "no_roadmap_recon")
VARIANT_ALIASES = {"full": "full", "no-input": "no_input_recon", "no-roadmap": "no_roadmap_recon"}
COMPONENTS = ("camera_ll", "lidar_ll", "detection_ll", "roadmap_ll", "pose_ll", "kl_initial", "kl_steps")


class ConfigError(ValueError):
    pass


class ElboError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


def canonical_variant(name: str) -> str:
    v = VARIANT_ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    sequence_length: int = 10
    total_iterations: int = 100_000
    variant: str = "full"
    seed: int = 0
    image_size: int = 64
    cell_size: float = 0.5
    checkpoint_every: int = 5000
    grad_clip: float = 100.0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sequence_length < 2:
            raise ConfigError(f"sequence_length must be >= 2, got {self.sequence_length}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if "image_size" in self.model:
            raise ConfigError("set image_size at the top level, not inside 'model'")
        self.model_config()

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.image_size, self.cell_size)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict({**self.model, "image_size": self.image_size})
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "variant" in d:
            d["variant"] = canonical_variant(d["variant"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- data


class TrainingData:
    """Episodes held as compact arrays (uint8 images) for window sampling."""

    def __init__(self, episodes: list[dict], grid: GridSpec):
        self.episodes = episodes
        self.grid = grid

    @classmethod
    def from_episodes(cls, episodes: list[Episode], grid: GridSpec) -> "TrainingData":
        from .worldsim.dataset import episode_arrays

        return cls([cls._unpack(episode_arrays(ep)) for ep in episodes], grid)

    @classmethod
    def from_directory(cls, path, grid: GridSpec) -> "TrainingData":
        return cls([cls._unpack(read_episode_arrays(d)[1]) for d in dataset_episode_dirs(path)], grid)

    @staticmethod
    def _unpack(a: dict) -> dict:
        idx = a["boxes_index"]
        boxes = [[OrientedBox(*(float(v) for v in r)) for r in a["boxes"][idx[t] : idx[t + 1]]] for t in range(len(idx) - 1)]
        return {k: a[k] for k in ("camera", "lidar", "roadmap", "poses", "actions")} | {"boxes": boxes}

    def __len__(self):
        return len(self.episodes)

    def lengths(self) -> list[int]:
        return [len(e["poses"]) for e in self.episodes]

    def window(self, ep: int, start: int, t: int) -> dict[str, np.ndarray]:
        e = self.episodes[ep]
        sl = slice(start, start + t)
        masks = [encode_boxes(b, self.grid) for b in e["boxes"][sl]]
        return {
            "camera": e["camera"][sl].astype(np.float32) / np.float32(255.0),
            "lidar": e["lidar"][sl].astype(np.float32) / np.float32(255.0),
            "roadmap": e["roadmap"][sl].astype(np.float32) / np.float32(255.0),
            "cls": np.stack([m.cls for m in masks]).astype(np.float32),
            "reg": np.stack([m.reg for m in masks]).astype(np.float32),
            "pose": e["poses"][sl].astype(np.float32),
            "actions": e["actions"][start : start + t - 1].astype(np.float32),
        }


def make_windows(data: TrainingData, t: int, seed: int) -> Iterator[dict]:
    """Endless stream of uniformly drawn (episode, start) windows of ``t`` frames."""
    lengths = data.lengths()
    if not lengths or t > min(lengths):
        raise ConfigError(f"window length {t} exceeds the shortest episode ({min(lengths) if lengths else 0} frames)")
    pairs = [(e, s) for e, n in enumerate(lengths) for s in range(n - t + 1)]
    rng = np.random.default_rng(seed)
    while True:
        e, s = pairs[int(rng.integers(len(pairs)))]
        w = data.window(e, s, t)
        w["episode"], w["start"] = e, s
        yield w


BATCH_KEYS = ("camera", "lidar", "roadmap", "cls", "reg", "pose", "actions")


def collate(windows: list[dict], dtype=torch.float32) -> dict[str, torch.Tensor]:
    t = len(windows[0]["pose"])
    for w in windows:
        if len(w["pose"]) != t or len(w["actions"]) != t - 1 or any(len(w[k]) != t for k in BATCH_KEYS[:-1]):
            raise ContractError("ragged batch: every trajectory must have the same length")
    return {k: torch.as_tensor(np.stack([w[k] for w in windows])).to(dtype) for k in BATCH_KEYS}


class Prefetcher:
    """Single-producer bounded queue of collated batches."""

    def __init__(self, windows: Iterator[dict], batch_size: int, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()

        def produce():
            while not self._stop.is_set():
                batch = collate([next(windows) for _ in range(batch_size)])
                while not self._stop.is_set():
                    try:
                        self._q.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue

        self._thread = threading.Thread(target=produce, daemon=True)
        self._thread.start()

    def __next__(self):
        return self._q.get()

    def close(self):
        self._stop.set()
        self._thread.join(timeout=1.0)


# ---------------------------------------------------------------- ELBO


@dataclass
class ElboReport:
    total: torch.Tensor
    components: dict[str, torch.Tensor]

    def as_dict(self) -> dict[str, float]:
        return {"total": float(self.total.detach())} | {k: float(v.detach()) for k, v in self.components.items()}


def sequence_elbo(model: LatentModel, batch: dict[str, torch.Tensor], noise: torch.Tensor, variant: str = "full") -> ElboReport:
    """Single-sample ELBO estimate, summed over time and averaged over the batch."""
    variant = canonical_variant(variant)
    cfg = model.cfg
    cam, lid = batch["camera"], batch["lidar"]
    b, t = cam.shape[:2]
    if batch["actions"].shape[:2] != (b, t - 1) or batch["pose"].shape[:2] != (b, t):
        raise ContractError("ragged batch: frames and actions are misaligned")
    if noise.shape != (b, t, cfg.latent_dim):
        raise ContractError(f"noise must have shape {(b, t, cfg.latent_dim)}, got {tuple(noise.shape)}")
    img = cam.shape[2:]
    feats = model.encode_frame(cam.reshape(b * t, *img), lid.reshape(b * t, *img)).reshape(b, t, -1)

    q = model.initial_posterior(features=feats[:, 0])
    kl_initial = kl_divergence(q, model.initial_prior(b, like=q.mean))
    z = sample_gaussian(q, noise[:, 0])
    zs = [z]
    kl_steps = torch.zeros_like(kl_initial)
    for tau in range(1, t):
        a = batch["actions"][:, tau - 1]
        q = model.step_posterior(z, a, features=feats[:, tau])
        p = model.step_prior(z, a)
        kl_steps = kl_steps + kl_divergence(q, p)
        z = sample_gaussian(q, noise[:, tau])
        zs.append(z)
    zz = torch.stack(zs, dim=1).reshape(b * t, -1)

    def per_traj(v):
        return v.reshape(b, t).sum(1).mean()

    zero = kl_initial.new_zeros(())
    comp = dict.fromkeys(COMPONENTS, zero)
    if variant != "no_input_recon":
        cam_mean, lid_mean = model.decode_sensors(zz)
        comp["camera_ll"] = per_traj(log_likelihood_image(cam.reshape(b * t, *img), cam_mean, cfg.sensor_sigma))
        comp["lidar_ll"] = per_traj(log_likelihood_image(lid.reshape(b * t, *img), lid_mean, cfg.sensor_sigma))
    if variant != "no_roadmap_recon":
        rm = batch["roadmap"].reshape(b * t, *img)
        comp["roadmap_ll"] = per_traj(log_likelihood_image(rm, model.decode_roadmap(zz), cfg.sensor_sigma))
    det = model.decode_detection(zz)
    cls_t = batch["cls"].reshape(b * t, *batch["cls"].shape[2:])
    reg_t = batch["reg"].reshape(b * t, *batch["reg"].shape[2:])
    cls_ll, reg_ll = log_likelihood_detection(cls_t, reg_t, det, cfg.reg_sigma)
    comp["detection_ll"] = per_traj(cls_ll + reg_ll)
    target = pose_target(batch["pose"].reshape(b * t, 3), cfg.map_bounds)
    comp["pose_ll"] = per_traj(log_likelihood_pose(target, model.decode_pose(zz)))
    comp["kl_initial"] = kl_initial.mean()
    comp["kl_steps"] = kl_steps.mean()

    for k in COMPONENTS:
        if not torch.isfinite(comp[k]):
            raise ElboError(f"non-finite ELBO component: {k}")
    total = (
        comp["camera_ll"] + comp["lidar_ll"] + comp["detection_ll"] + comp["roadmap_ll"] + comp["pose_ll"]
        - comp["kl_initial"] - comp["kl_steps"]
    )
    return ElboReport(total, comp)


# ---------------------------------------------------------------- training loop

CSV_FIELDS = ("iter", "total") + COMPONENTS + ("wall_time",)


def build_model(config: TrainConfig) -> LatentModel:
    torch.manual_seed(config.seed)
    return LatentModel(config.model_config())


def noise_stream(config: TrainConfig, latent_dim: int) -> Iterator[torch.Tensor]:
    gen = torch.Generator().manual_seed(config.seed + 1)
    shape = (config.batch_size, config.sequence_length, latent_dim)
    while True:
        yield torch.randn(shape, generator=gen)


@dataclass
class TrainResult:
    model: LatentModel
    metrics: list[dict]
    checkpoints: list[Path]


def train(config: TrainConfig, data: TrainingData, out_dir=None, prefetch: bool = True, model: LatentModel | None = None) -> TrainResult:
    usable = sum(n >= config.sequence_length for n in data.lengths())
    if usable < config.batch_size:
        raise ConfigError(
            f"dataset has {usable} trajectories of length >= {config.sequence_length}; batch_size is {config.batch_size}"
        )
    if data.grid != config.grid:
        raise ConfigError(f"dataset grid {data.grid} != config grid {config.grid}")
    model = model or build_model(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    windows = make_windows(data, config.sequence_length, config.seed)
    batches = Prefetcher(windows, config.batch_size) if prefetch else None
    noise = noise_stream(config, model.cfg.latent_dim)

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
    metrics, checkpoints = [], []
    bad_streak, t0 = 0, time.perf_counter()
    try:
        for it in range(config.total_iterations):
            batch = next(batches) if batches else collate([next(windows) for _ in range(config.batch_size)])
            eps = next(noise)
            try:
                report = sequence_elbo(model, batch, eps, config.variant)
            except ElboError as exc:
                bad_streak += 1
                log.warning("iteration %d: %s", it, exc)
                if bad_streak >= 10:
                    raise TrainingAborted(f"10 consecutive non-finite losses, last at iteration {it}: {exc}") from exc
                continue
            bad_streak = 0
            opt.zero_grad(set_to_none=True)
            (-report.total).backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            row = {"iter": it} | report.as_dict() | {"wall_time": time.perf_counter() - t0}
            metrics.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            done = it + 1
            if out is not None and (done % config.checkpoint_every == 0 or done == config.total_iterations):
                path = out / f"checkpoint_{done:07d}.ckpt"
                save_checkpoint(model, path, {"iteration": done, "train_config": config.to_dict()})
                checkpoints.append(path)
    finally:
        if batches:
            batches.close()
        if fh:
            fh.close()
    return TrainResult(model, metrics, checkpoints)


def smoothed(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    k = min(window, len(v))
    return np.convolve(v, np.ones(k) / k, mode="valid")
