"""Dataset generation and the ``STVD`` file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .physics import (
    N_ACTIONS, EnvConfig, SimState, sample_initial_state, step,
)
from .render import render_frame

MAGIC = b"STVD"
VERSION = 1


@dataclass
class Dataset:
    positions: np.ndarray            # (N, T, O, 2)
    velocities: np.ndarray           # (N, T, O, 2)
    radii: np.ndarray                # (N, O)
    masses: np.ndarray               # (N, O)
    config: EnvConfig
    seed: int
    frames: np.ndarray | None = None   # (N, T, H, W) or (N, T, H, W, 3)
    actions: np.ndarray | None = None  # (N, T) action applied at frame t
    rewards: np.ndarray | None = None  # (N, T) reward of that transition

    @property
    def n_sequences(self) -> int:
        return self.positions.shape[0]

    @property
    def length(self) -> int:
        return self.positions.shape[1]

    @property
    def n_objects(self) -> int:
        return self.positions.shape[2]

    def state(self, n: int, t: int) -> SimState:
        return SimState(self.positions[n, t].copy(), self.velocities[n, t].copy(),
                        self.radii[n].copy(), self.masses[n].copy())

    def subset(self, index) -> "Dataset":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return Dataset(self.positions[index], self.velocities[index], self.radii[index],
                       self.masses[index], self.config, self.seed, pick(self.frames),
                       pick(self.actions), pick(self.rewards))


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def rollout_sequence(config: EnvConfig, length: int, rng: np.random.Generator):
    scale = config.velocity_scale
    if config.diverse_energy:
        scale *= rng.uniform(1.0 - config.energy_spread, 1.0 + config.energy_spread)
    state = sample_initial_state(config, rng, velocity_scale=scale)
    controlled = config.kind == "billiards-control"
    pos = np.empty((length, config.n_objects, 2))
    vel = np.empty_like(pos)
    actions = rng.integers(0, N_ACTIONS, size=length) if controlled else None
    rewards = np.zeros(length) if controlled else None
    for t in range(length):
        pos[t] = state.positions
        vel[t] = state.velocities
        if controlled:
            state, rewards[t] = step(state, config, int(actions[t]))
        elif t + 1 < length:
            state, _ = step(state, config)
    return pos, vel, state.radii, state.masses, actions, rewards


def generate_dataset(config: EnvConfig, n: int, length: int, seed: int, frames: bool = False) -> Dataset:
    if n < 1 or length < 1:
        raise ValueError("need n >= 1 and length >= 1")
    O = config.n_objects
    positions = np.empty((n, length, O, 2))
    velocities = np.empty_like(positions)
    radii = np.empty((n, O))
    masses = np.empty((n, O))
    controlled = config.kind == "billiards-control"
    actions = np.empty((n, length), dtype=np.int64) if controlled else None
    rewards = np.empty((n, length)) if controlled else None
    for i in range(n):
        p, v, r, m, a, rw = rollout_sequence(config, length, sequence_rng(seed, i))
        positions[i], velocities[i], radii[i], masses[i] = p, v, r, m
        if controlled:
            actions[i], rewards[i] = a, rw
    ds = Dataset(positions, velocities, radii, masses, config, int(seed), None, actions, rewards)
    if frames:
        ds.frames = render_dataset(ds)
    return ds


def render_dataset(ds: Dataset) -> np.ndarray:
    res = ds.config.image_size
    colors = True if ds.config.color else None
    out = []
    zeros = np.zeros((ds.n_objects, 2))
    for i in range(ds.n_sequences):
        seq = [render_frame(SimState(p, zeros, ds.radii[i], ds.masses[i]), res, colors)
               for p in ds.positions[i]]
        out.append(np.stack(seq))
    return np.stack(out)


# --------------------------------------------------------------------------
# file format


def _header_json(ds: Dataset) -> bytes:
    blob = {"config": json.loads(ds.config.to_json()), "seed": ds.seed}
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dataset_bytes(ds: Dataset) -> bytes:
    meta = _header_json(ds)
    H = W = 0
    if ds.frames is not None:
        H, W = ds.frames.shape[2:4]
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<Q", len(meta)), meta,
        struct.pack("<5Q", ds.n_sequences, ds.length, ds.n_objects, H, W),
        struct.pack("<3B", ds.frames is not None, ds.actions is not None, ds.rewards is not None),
    ]
    arrays = [ds.positions, ds.velocities, ds.radii, ds.masses]
    arrays += [a for a in (ds.frames, ds.actions, ds.rewards) if a is not None]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    pos = 6
    (n_meta,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    meta = json.loads(data[pos:pos + n_meta])
    pos += n_meta
    N, T, O, H, W = struct.unpack_from("<5Q", data, pos)
    pos += 40
    has_frames, has_actions, has_rewards = struct.unpack_from("<3B", data, pos)
    pos += 3
    config = EnvConfig.from_dict(meta["config"])

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        return arr.astype(np.float64)

    positions = take((N, T, O, 2))
    velocities = take((N, T, O, 2))
    radii = take((N, O))
    masses = take((N, O))
    frames = actions = rewards = None
    if has_frames:
        frames = take((N, T, H, W, 3) if config.color else (N, T, H, W))
    if has_actions:
        actions = take((N, T)).astype(np.int64)
    if has_rewards:
        rewards = take((N, T))
    return Dataset(positions, velocities, radii, masses, config, int(meta["seed"]),
                   frames, actions, rewards)
