"""Episodic demonstration store, window sampling, normalization, rotation utils.

On-disk dataset layout (format "demo-v1"), one directory per dataset:

    index.json                 lengths, shapes, per-episode metadata
    ep000000.frames.u8         raw uint8 RGB, [len, n_cameras, 3, H, W]
    ep000000.lowdim.f32        raw little-endian float32, [len, Dl]
    ep000000.actions.f32       raw little-endian float32, [len, Da]

Frames are stored as uint8 [0, 255] and scaled to [0, 1] on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ArchiveError, ConfigurationError, DomainError

DATASET_FORMAT_VERSION = "demo-v1"
NORMALIZER_RANGE_FLOOR = 1e-8


@dataclass
class EpisodeRecord:
    """One demonstration or evaluation episode."""

    frames: np.ndarray   # uint8 [len, n_cam, 3, H, W]
    lowdim: np.ndarray   # float32 [len, Dl]
    actions: np.ndarray  # float32 [len, Da]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.actions)
        if n < 1:
            raise DomainError("episode must contain at least one step")
        if len(self.frames) != n or len(self.lowdim) != n:
            raise DomainError("observation count must equal action count")

    def __len__(self) -> int:
        return len(self.actions)


def save_dataset(path, episodes: list[EpisodeRecord], task: str, extra_meta: dict | None = None) -> None:
    if not episodes:
        raise ConfigurationError("refusing to write an empty dataset")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    first = episodes[0]
    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "task": task,
        "n_cameras": int(first.frames.shape[1]),
        "image_hw": [int(first.frames.shape[3]), int(first.frames.shape[4])],
        "lowdim_dim": int(first.lowdim.shape[1]),
        "action_dim": int(first.actions.shape[1]),
        "episodes": [],
    }
    if extra_meta:
        index["meta"] = extra_meta
    for i, ep in enumerate(episodes):
        eid = f"ep{i:06d}"
        index["episodes"].append({
            "id": eid,
            "length": len(ep),
            "seed": ep.meta.get("seed"),
            "success": bool(ep.meta.get("success", False)),
        })
        np.ascontiguousarray(ep.frames, dtype=np.uint8).tofile(path / f"{eid}.frames.u8")
        ep.lowdim.astype("<f4").tofile(path / f"{eid}.lowdim.f32")
        ep.actions.astype("<f4").tofile(path / f"{eid}.actions.f32")
    (path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_dataset(path) -> tuple[list[EpisodeRecord], dict]:
    path = Path(path)
    index_path = path / "index.json"
    if not index_path.exists():
        raise ArchiveError(f"no dataset at {path} (index.json missing)")
    index = json.loads(index_path.read_text())
    if index.get("format_version") != DATASET_FORMAT_VERSION:
        raise ArchiveError(
            f"dataset {path}: format {index.get('format_version')!r}, expected {DATASET_FORMAT_VERSION!r}"
        )
    n_cam = index["n_cameras"]
    h, w = index["image_hw"]
    dl, da = index["lowdim_dim"], index["action_dim"]
    episodes = []
    for entry in index["episodes"]:
        eid, n = entry["id"], entry["length"]
        frames = np.fromfile(path / f"{eid}.frames.u8", dtype=np.uint8)
        lowdim = np.fromfile(path / f"{eid}.lowdim.f32", dtype="<f4")
        actions = np.fromfile(path / f"{eid}.actions.f32", dtype="<f4")
        try:
            frames = frames.reshape(n, n_cam, 3, h, w)
            lowdim = lowdim.reshape(n, dl)
            actions = actions.reshape(n, da)
        except ValueError as e:
            raise ArchiveError(f"dataset {path}: episode {eid} is truncated or malformed") from e
        episodes.append(EpisodeRecord(frames, lowdim, actions,
                                      meta={"seed": entry.get("seed"), "success": entry.get("success")}))
    return episodes, index


def sample_sequence(ep: EpisodeRecord, idx: int, horizon: int,
                    pad_before: int, pad_after: int) -> dict:
    """Horizon-length window anchored at ``idx``.

    Window row r maps to episode step ``idx - pad_before + r``; steps outside
    the episode replicate the nearest edge step. Row ``pad_before`` is the
    anchor itself.
    """
    n = len(ep)
    if not 0 <= idx < n:
        raise DomainError(f"idx {idx} out of range [0, {n})")
    start = idx - pad_before
    rows = np.clip(np.arange(start, start + horizon), 0, n - 1)
    return {
        "frames": ep.frames[rows],
        "lowdim": ep.lowdim[rows],
        "actions": ep.actions[rows],
        "rows": rows,
    }


def enumerate_anchors(length: int, horizon: int, pad_before: int, pad_after: int) -> range:
    """Anchor indices whose windows stay within the padding allowances."""
    last = length - (horizon - pad_before - pad_after)
    return range(0, max(1, last + 1))


@dataclass
class Normalizer:
    """Per-dimension min-max map onto [-1, 1].

    Degenerate dimensions (max == min) get a floored range so they map to 0.
    """

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ConfigurationError("normalizer stats must be 1-D and congruent")
        if (self.maxs < self.mins).any():
            raise ConfigurationError("normalizer max < min")
        self._center = (self.mins + self.maxs) / 2.0
        self._half = np.maximum((self.maxs - self.mins) / 2.0, NORMALIZER_RANGE_FLOOR / 2.0)

    def normalize(self, x):
        if isinstance(x, torch.Tensor):
            c = torch.from_numpy(self._center).to(x.dtype)
            h = torch.from_numpy(self._half).to(x.dtype)
            return (x - c) / h
        x = np.asarray(x)
        return ((x - self._center) / self._half).astype(x.dtype, copy=False)

    def denormalize(self, x):
        if isinstance(x, torch.Tensor):
            c = torch.from_numpy(self._center).to(x.dtype)
            h = torch.from_numpy(self._half).to(x.dtype)
            return x * h + c
        x = np.asarray(x)
        return (x * self._half + self._center).astype(x.dtype, copy=False)


def fit_normalizer(arrays: list[np.ndarray]) -> Normalizer:
    """Fit per-dimension min/max over a list of [len, D] arrays."""
    if not arrays:
        raise ConfigurationError("cannot fit a normalizer on an empty dataset")
    stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
    return Normalizer(stacked.min(axis=0), stacked.max(axis=0))


def quat_to_rot6d(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to the 6-D rotation representation.

    Returns the first two columns of the rotation matrix, column-major.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise DomainError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise DomainError(f"quaternion norm {norm:.8f} is not 1 within 1e-6")
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return np.concatenate([rot[:, 0], rot[:, 1]])


def split_train_val(episodes: list, val_ratio: float, seed: int) -> tuple[list, list]:
    """Deterministic episode-level split; ceil(val_ratio * N) episodes go to validation."""
    if not 0.0 <= val_ratio < 1.0:
        raise ConfigurationError(f"val_ratio must be in [0, 1), got {val_ratio}")
    n = len(episodes)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = math.ceil(val_ratio * n)
    val_idx = set(perm[:n_val].tolist())
    train = [episodes[i] for i in range(n) if i not in val_idx]
    val = [episodes[i] for i in range(n) if i in val_idx]
    return train, val


class WindowDataset:
    """Enumerated (episode, anchor) training windows as torch tensors.

    Actions are returned for the full horizon; observations only for the
    first ``n_obs_steps`` rows, already scaled to [0, 1] floats.
    """

    def __init__(self, episodes: list[EpisodeRecord], horizon: int, n_obs_steps: int,
                 pad_before: int, pad_after: int):
        if not episodes:
            raise ConfigurationError("dataset has no episodes")
        self.episodes = episodes
        self.horizon = horizon
        self.n_obs_steps = n_obs_steps
        self.pad_before = pad_before
        self.pad_after = pad_after
        self.entries = [
            (ei, idx)
            for ei, ep in enumerate(episodes)
            for idx in enumerate_anchors(len(ep), horizon, pad_before, pad_after)
        ]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> dict:
        ei, idx = self.entries[i]
        win = sample_sequence(self.episodes[ei], idx, self.horizon, self.pad_before, self.pad_after)
        nobs = self.n_obs_steps
        return {
            "frames": torch.from_numpy(win["frames"][:nobs].astype(np.float32) / 255.0),
            "lowdim": torch.from_numpy(win["lowdim"][:nobs].astype(np.float32)),
            "actions": torch.from_numpy(win["actions"].astype(np.float32)),
        }

    def collate(self, indices) -> dict:
        items = [self[int(i)] for i in indices]
        return {k: torch.stack([it[k] for it in items]) for k in items[0]}
