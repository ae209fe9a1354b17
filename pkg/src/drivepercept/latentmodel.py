"""Sequential latent model: filtering posterior, latent transition, decoders, densities.

Images enter and leave as NHWC tensors in [0, 1]; conv stacks run NCHW
internally.  Every distribution is a diagonal Gaussian described by
:class:`GaussianParams` except the detection class map (Bernoulli).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

LOG_2PI = math.log(2.0 * math.pi)

# (filters, kernel) of the stride-2 stages for a 128 x 128 input
ENCODER_STAGES = [(32, 5), (64, 3), (128, 3), (256, 3), (256, 3)]
DECODER_STAGES = [256, 256, 128, 64, 32]
DETECTION_STAGES = [256, 128, 64, 32]


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    latent1_dim: int = 32
    latent2_dim: int = 256
    hidden: int = 256
    feature_dim: int = 256
    width: float = 1.0
    action_dim: int = 2
    map_bounds: float = 200.0
    sensor_sigma: float = 0.1
    reg_sigma: float = 1.0
    log_std_min: float = -10.0
    log_std_max: float = 3.0

    def __post_init__(self):
        n = self.n_stride_stages
        if n < 1 or 4 * 2**n != self.image_size:
            raise ContractError(f"image_size must be 4 * 2^k with k >= 1, got {self.image_size}")

    @property
    def latent_dim(self) -> int:
        return self.latent1_dim + self.latent2_dim

    @property
    def n_stride_stages(self) -> int:
        return int(round(math.log2(max(self.image_size, 1) / 4)))

    def channels(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()


class DetectionOutput(NamedTuple):
    cls_logits: torch.Tensor  # (N, H, W, 1)
    reg: torch.Tensor  # (N, H, W, 6)

    @property
    def cls(self) -> torch.Tensor:
        return torch.sigmoid(self.cls_logits)


# ---------------------------------------------------------------- densities


def sample_gaussian(p: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mean + std * noise``."""
    if noise.shape != p.mean.shape:
        raise ContractError(f"noise shape {tuple(noise.shape)} != parameter shape {tuple(p.mean.shape)}")
    return p.mean + p.log_std.exp() * noise


def kl_divergence(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ContractError(f"KL dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    mahal = ((q.mean - p.mean) / p.log_std.exp()) ** 2
    return 0.5 * (var_ratio + mahal - 1.0).sum(-1) + (p.log_std - q.log_std).sum(-1)


def gaussian_log_density(x: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    return -0.5 * ((x - mean) / log_std.exp()) ** 2 - log_std - 0.5 * LOG_2PI


def log_likelihood_image(x: torch.Tensor, mean: torch.Tensor, sigma: float = 0.1) -> torch.Tensor:
    """Sum of per-pixel Gaussian log densities over all but the leading axis."""
    if x.shape != mean.shape:
        raise ContractError(f"image shape {tuple(x.shape)} != decoded shape {tuple(mean.shape)}")
    ll = -0.5 * ((x - mean) / sigma) ** 2 - math.log(sigma) - 0.5 * LOG_2PI
    return ll.reshape(ll.shape[0], -1).sum(-1)


def log_likelihood_detection(cls_target: torch.Tensor, reg_target: torch.Tensor, decoded: DetectionOutput, reg_sigma: float = 1.0):
    """Bernoulli over every class cell plus Gaussian over regression at positive cells.

    Returns ``(cls_term, reg_term)``, each of shape (N,).
    """
    if cls_target.shape != decoded.cls_logits.shape or reg_target.shape != decoded.reg.shape:
        raise ContractError(
            f"detection target shapes {tuple(cls_target.shape)}/{tuple(reg_target.shape)} "
            f"!= decoded {tuple(decoded.cls_logits.shape)}/{tuple(decoded.reg.shape)}"
        )
    n = cls_target.shape[0]
    cls_ll = -F.binary_cross_entropy_with_logits(decoded.cls_logits, cls_target, reduction="none")
    reg_ll = -0.5 * ((reg_target - decoded.reg) / reg_sigma) ** 2 - math.log(reg_sigma) - 0.5 * LOG_2PI
    reg_ll = reg_ll * (cls_target > 0).to(reg_ll.dtype)
    return cls_ll.reshape(n, -1).sum(-1), reg_ll.reshape(n, -1).sum(-1)


def log_likelihood_pose(target: torch.Tensor, decoded: GaussianParams) -> torch.Tensor:
    return gaussian_log_density(target, decoded.mean, decoded.log_std).sum(-1)


def pose_target(pose: torch.Tensor, map_bounds: float) -> torch.Tensor:
    """Global (x, y, yaw) -> (x_n, y_n, cos yaw, sin yaw) with x_n, y_n in [-1, 1]."""
    xy = 2.0 * pose[..., :2] / map_bounds - 1.0
    yaw = pose[..., 2:3]
    return torch.cat([xy, torch.cos(yaw), torch.sin(yaw)], dim=-1)


def extract_pose(mean: np.ndarray, map_bounds: float) -> np.ndarray:
    """Inverse of :func:`pose_target` on a decoded mean; (cos, sin) need not be unit norm."""
    mean = np.asarray(mean, dtype=np.float64)
    xy = (mean[..., :2] + 1.0) * map_bounds / 2.0
    yaw = np.arctan2(mean[..., 3], mean[..., 2])
    yaw = np.where(yaw <= -math.pi, math.pi, yaw)
    return np.concatenate([xy, yaw[..., None]], axis=-1)


# ---------------------------------------------------------------- networks


def _act():
    return nn.LeakyReLU(0.2)


def _same_pad(k: int) -> int:
    return (k - 1) // 2


class ImageEncoder(nn.Sequential):
    def __init__(self, cfg: ModelConfig):
        layers, c_in = [], 3
        for filters, k in ENCODER_STAGES[: cfg.n_stride_stages]:
            c = cfg.channels(filters)
            layers += [nn.Conv2d(c_in, c, k, 2, _same_pad(k)), _act()]
            c_in = c
        layers += [nn.Conv2d(c_in, cfg.feature_dim, 4, 1), _act(), nn.Flatten()]
        super().__init__(*layers)


def _deconv_trunk(cfg: ModelConfig, stages: list[int]) -> tuple[nn.Sequential, int]:
    mids = stages[len(stages) - (cfg.n_stride_stages - 1) :] if cfg.n_stride_stages > 1 else []
    c0 = cfg.channels(256)
    layers: list[nn.Module] = [nn.Unflatten(1, (cfg.latent_dim, 1, 1)), nn.ConvTranspose2d(cfg.latent_dim, c0, 4, 1), _act()]
    c_in = c0
    for filters in mids:
        c = cfg.channels(filters)
        layers += [nn.ConvTranspose2d(c_in, c, 3, 2, 1, output_padding=1), _act()]
        c_in = c
    return nn.Sequential(*layers), c_in


def _output_deconv(c_in: int, c_out: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(c_in, c_out, 5, 2, 2, output_padding=1)


class ImageDecoder(nn.Module):
    """Latent -> per-pixel mean image (fixed-sigma Gaussian)."""

    def __init__(self, cfg: ModelConfig, out_channels: int = 3):
        super().__init__()
        self.trunk, c = _deconv_trunk(cfg, DECODER_STAGES[1:])
        self.out = _output_deconv(c, out_channels)

    def forward(self, z):
        return self.out(self.trunk(z)).permute(0, 2, 3, 1)


class DetectionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk, c = _deconv_trunk(cfg, DETECTION_STAGES)
        self.cls_head = _output_deconv(c, 1)
        self.reg_head = _output_deconv(c, 6)

    def forward(self, z) -> DetectionOutput:
        h = self.trunk(z)
        return DetectionOutput(self.cls_head(h).permute(0, 2, 3, 1), self.reg_head(h).permute(0, 2, 3, 1))


class GaussianMLP(nn.Module):
    """Two hidden fully connected layers followed by a Gaussian output layer."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, log_std_range: tuple[float, float]):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), _act(), nn.Linear(hidden, hidden), _act())
        self.head = nn.Linear(hidden, 2 * out_dim)
        self.log_std_range = log_std_range

    def forward(self, x) -> GaussianParams:
        mean, raw = self.head(self.net(x)).chunk(2, dim=-1)
        return GaussianParams(mean, raw.clamp(*self.log_std_range))


class LatentModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h, a = cfg.latent_dim, cfg.hidden, cfg.action_dim
        rng = (cfg.log_std_min, cfg.log_std_max)
        self.camera_encoder = ImageEncoder(cfg)
        self.lidar_encoder = ImageEncoder(cfg)
        feat = 2 * cfg.feature_dim
        self.posterior_first = GaussianMLP(feat, h, d, rng)
        self.posterior_step = GaussianMLP(feat + d + a, h, d, rng)
        self.prior_step = GaussianMLP(d + a, h, d, rng)
        self.camera_decoder = ImageDecoder(cfg)
        self.lidar_decoder = ImageDecoder(cfg)
        self.roadmap_decoder = ImageDecoder(cfg)
        self.detection_decoder = DetectionDecoder(cfg)
        self.pose_decoder = GaussianMLP(d, h, 4, rng)

    # -- inputs
    def _check_image(self, img: torch.Tensor, name: str):
        s = self.cfg.image_size
        if img.dim() != 4 or tuple(img.shape[1:]) != (s, s, 3):
            raise ContractError(f"{name} must be (N, {s}, {s}, 3), got {tuple(img.shape)}")

    def encode_frame(self, camera: torch.Tensor, lidar: torch.Tensor) -> torch.Tensor:
        """(N, H, W, 3) x 2 -> (N, 2 * feature_dim)."""
        self._check_image(camera, "camera")
        self._check_image(lidar, "lidar")
        fc = self.camera_encoder(camera.permute(0, 3, 1, 2))
        fl = self.lidar_encoder(lidar.permute(0, 3, 1, 2))
        return torch.cat([fc, fl], dim=-1)

    # -- latent dynamics
    def initial_posterior(self, camera=None, lidar=None, features=None) -> GaussianParams:
        if features is None:
            features = self.encode_frame(camera, lidar)
        return self.posterior_first(features)

    def step_posterior(self, z, action, camera=None, lidar=None, features=None) -> GaussianParams:
        if features is None:
            features = self.encode_frame(camera, lidar)
        return self.posterior_step(torch.cat([features, z, action], dim=-1))

    def initial_prior(self, batch: int = 1, like: torch.Tensor | None = None) -> GaussianParams:
        ref = like if like is not None else next(self.parameters())
        zeros = torch.zeros(batch, self.cfg.latent_dim, dtype=ref.dtype, device=ref.device)
        return GaussianParams(zeros, zeros.clone())

    def step_prior(self, z, action) -> GaussianParams:
        if not (torch.isfinite(z).all() and torch.isfinite(action).all()):
            raise ContractError("non-finite latent or action passed to step_prior")
        return self.prior_step(torch.cat([z, action], dim=-1))

    # -- decoders
    def decode_sensors(self, z):
        return self.camera_decoder(z), self.lidar_decoder(z)

    def decode_detection(self, z) -> DetectionOutput:
        return self.detection_decoder(z)

    def decode_roadmap(self, z):
        return self.roadmap_decoder(z)

    def decode_pose(self, z) -> GaussianParams:
        return self.pose_decoder(z)

    def split_latent(self, z):
        return z[..., : self.cfg.latent1_dim], z[..., self.cfg.latent1_dim :]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DPCK"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LatentModel, path, meta: dict | None = None) -> None:
    """Named-tensor archive: magic, u32 header length, JSON header, little-endian f32 payload."""
    state = model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        tensors.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "drivepercept-checkpoint/1",
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "tensors": tensors,
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hb)) + hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    return header, raw[8 + n :]


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[LatentModel, dict]:
    header, payload = read_checkpoint_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.hash() != header.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected_config is not None and expected_config.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected model config")
    model = LatentModel(cfg)
    state = {}
    for t in header["tensors"]:
        seg = payload[t["offset"] : t["offset"] + t["nbytes"]]
        if len(seg) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = torch.from_numpy(np.frombuffer(seg, dtype="<f4").reshape(t["shape"]).copy())
    model.load_state_dict(state)
    return model, header.get("meta", {})
