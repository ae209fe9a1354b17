"""On-disk episode datasets.

Layout::

    DIR/dataset.json                 {"format": ..., "episodes": [subdir, ...]}
    DIR/episode_00000/manifest.json  seed, frame count, array descriptors
    DIR/episode_00000/<array>.bin    raw little-endian payloads

Boxes are ragged: ``boxes_index`` holds per-frame offsets (frames + 1) into
``boxes`` rows of ``(cx, cy, heading, length, width)``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..geometry import OrientedBox
from .dynamics import EgoAction
from .episode import Episode, ObservationFrame

FORMAT = "drivepercept-dataset/1"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}
IMAGE_ARRAYS = ("camera", "lidar", "roadmap")


class DatasetFormatError(ValueError):
    pass


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def episode_arrays(ep: Episode) -> dict[str, np.ndarray]:
    frames = ep.frames
    counts = [len(f.gt_boxes) for f in frames]
    index = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
    boxes = [[b.cx, b.cy, b.heading, b.length, b.width] for f in frames for b in f.gt_boxes]
    return {
        "camera": np.stack([_to_u8(f.camera) for f in frames]),
        "lidar": np.stack([_to_u8(f.lidar_bev) for f in frames]),
        "roadmap": np.stack([_to_u8(f.roadmap) for f in frames]),
        "poses": np.stack([f.ego_pose for f in frames]).astype(np.float32),
        "actions": np.array([a.as_array() for a in ep.actions], dtype=np.float32).reshape(-1, 2),
        "boxes_index": index,
        "boxes": np.array(boxes, dtype=np.float32).reshape(-1, 5),
    }


def write_episode(ep: Episode, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    descriptors = []
    for name, arr in episode_arrays(ep).items():
        code = {np.uint8: "u8", np.float32: "f32", np.int32: "i32"}[arr.dtype.type]
        fname = f"{name}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
        descriptors.append({"name": name, "dtype": code, "shape": list(arr.shape), "filename": fname, "byte_order": "little"})
    manifest = {
        "seed": ep.seed,
        "frame_count": len(ep.frames),
        "world_ref": ep.world_ref,
        "meta": ep.meta,
        "arrays": descriptors,
    }
    _write_json_atomic(directory / "manifest.json", manifest)


def write_dataset(episodes, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for k, ep in enumerate(episodes):
        name = f"episode_{k:05d}"
        write_episode(ep, path / name)
        names.append(name)
    _write_json_atomic(path / "dataset.json", {"format": FORMAT, "episodes": names})


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"missing manifest: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"corrupt manifest {path}: {exc}") from None


def read_episode_arrays(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = _read_json(directory / "manifest.json")
    try:
        descriptors = manifest["arrays"]
        n = int(manifest["frame_count"])
        manifest["seed"]
    except (KeyError, TypeError, ValueError):
        raise DatasetFormatError(f"corrupt manifest {directory / 'manifest.json'}: missing keys") from None
    arrays = {}
    for d in descriptors:
        fpath = directory / d["filename"]
        if d.get("byte_order", "little") != "little" or d["dtype"] not in DTYPES:
            raise DatasetFormatError(f"unsupported array descriptor in {directory / 'manifest.json'}: {d}")
        dtype = DTYPES[d["dtype"]]
        shape = tuple(d["shape"])
        try:
            raw = fpath.read_bytes()
        except FileNotFoundError:
            raise DatasetFormatError(f"missing array file: {fpath}") from None
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise DatasetFormatError(f"{fpath}: {len(raw)} bytes, manifest shape {shape} needs {expected}")
        arrays[d["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape)
    for name in IMAGE_ARRAYS + ("poses",):
        if name not in arrays or arrays[name].shape[0] != n:
            raise DatasetFormatError(f"{directory}: array '{name}' missing or inconsistent with frame_count {n}")
    if arrays["actions"].shape != (n - 1, 2) or arrays["boxes_index"].shape != (n + 1,):
        raise DatasetFormatError(f"{directory}: actions/boxes_index shapes inconsistent with frame_count {n}")
    if int(arrays["boxes_index"][-1]) != arrays["boxes"].shape[0]:
        raise DatasetFormatError(f"{directory}: boxes_index does not match boxes payload")
    return manifest, arrays


def read_episode(directory) -> Episode:
    manifest, a = read_episode_arrays(directory)
    idx = a["boxes_index"]
    frames = []
    for t in range(int(manifest["frame_count"])):
        rows = a["boxes"][idx[t] : idx[t + 1]]
        frames.append(
            ObservationFrame(
                camera=a["camera"][t].astype(np.float32) / np.float32(255.0),
                lidar_bev=a["lidar"][t].astype(np.float32) / np.float32(255.0),
                roadmap=a["roadmap"][t].astype(np.float32) / np.float32(255.0),
                ego_pose=a["poses"][t].copy(),
                gt_boxes=[OrientedBox(*(float(v) for v in r)) for r in rows],
            )
        )
    actions = [EgoAction(float(s), float(c)) for s, c in a["actions"]]
    return Episode(frames, actions, int(manifest["seed"]), str(manifest.get("world_ref", "")), manifest.get("meta", {}))


def dataset_episode_dirs(path) -> list[Path]:
    path = Path(path)
    index = _read_json(path / "dataset.json")
    if index.get("format") != FORMAT or not isinstance(index.get("episodes"), list):
        raise DatasetFormatError(f"corrupt manifest {path / 'dataset.json'}: unexpected format")
    return [path / name for name in index["episodes"]]


def read_dataset(path) -> list[Episode]:
    return [read_episode(d) for d in dataset_episode_dirs(path)]
