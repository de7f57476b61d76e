"""Ground-truth simulators: billiards with exact time-of-impact, clipped gravity."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from numba import njit

KINDS = ("billiards", "gravity", "billiards-control")
N_ACTIONS = 9
REST_ACTION = 8

_S = math.sqrt(0.5)
# action k < 8 points at angle k * 45 degrees; action 8 is "rest"
ACTION_DIRECTIONS = np.array(
    [[1, 0], [_S, _S], [0, 1], [-_S, _S], [-1, 0], [-_S, -_S], [0, -1], [_S, -_S], [0, 0]],
    dtype=np.float64,
)

# one RGB colour per object for the control task
OBJECT_COLORS = np.array(
    [[1.0, 0.15, 0.15], [0.15, 1.0, 0.15], [0.2, 0.35, 1.0], [1.0, 1.0, 0.2], [0.9, 0.2, 1.0]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "billiards"
    n_objects: int = 3
    radius: float = 0.1
    mass: float = 1.0
    dt: float = 1.0
    # per-component std of the Gaussian velocity draw (billiards) or orbital speed (gravity)
    velocity_scale: float = 0.042
    gravity_const: float = 8e-5
    clip_distance: float = 0.1
    basin_strength: float = 1e-2
    substeps: int = 10
    action_impulse: float = 0.01
    resolution: int = 0  # 0 -> kind default (32 billiards, 50 gravity)
    diverse_energy: bool = False
    energy_spread: float = 0.5  # diverse mode: scale factor drawn from U(1 - s, 1 + s)
    spawn_margin: float = 0.0  # extra keep-out from the canvas edge when sampling

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {KINDS}")
        if self.n_objects < 2:
            raise ValueError("n_objects must be >= 2")
        for name in ("radius", "mass", "dt", "velocity_scale", "gravity_const",
                     "clip_distance", "basin_strength", "action_impulse"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def image_size(self) -> int:
        if self.resolution:
            return self.resolution
        return 50 if self.kind == "gravity" else 32

    @property
    def color(self) -> bool:
        return self.kind == "billiards-control"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "EnvConfig":
        return replace(self, **changes)


def default_config(kind: str, **overrides) -> EnvConfig:
    if kind == "gravity":
        base = dict(kind=kind, radius=0.06, velocity_scale=0.02, spawn_margin=0.15)
    else:
        base = dict(kind=kind)
    base.update(overrides)
    return EnvConfig(**base)


@dataclass
class SimState:
    positions: np.ndarray   # (O, 2)
    velocities: np.ndarray  # (O, 2) world units per frame
    radii: np.ndarray       # (O,)
    masses: np.ndarray      # (O,)

    def copy(self) -> "SimState":
        return SimState(self.positions.copy(), self.velocities.copy(), self.radii.copy(), self.masses.copy())

    @property
    def n_objects(self) -> int:
        return self.positions.shape[0]


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _billiards_advance(pos, vel, radii, masses, dt, tracked):
    """Advance in place by ``dt`` with chronological event handling.

    Returns the number of ball-ball collisions involving object ``tracked``
    (pass -1 to track nothing).
    """
    n = pos.shape[0]
    remaining = dt
    hits = 0
    for _ in range(10000):
        t_min = remaining
        kind = -1
        ia = -1
        ib = -1
        for i in range(n):
            for ax in range(2):
                v = vel[i, ax]
                if v < 0.0:
                    t = (radii[i] - pos[i, ax]) / v
                elif v > 0.0:
                    t = (1.0 - radii[i] - pos[i, ax]) / v
                else:
                    continue
                if t < 0.0:
                    t = 0.0
                if t < t_min:
                    t_min = t
                    kind = 0
                    ia = i
                    ib = ax
        for i in range(n):
            for j in range(i + 1, n):
                dx = pos[j, 0] - pos[i, 0]
                dy = pos[j, 1] - pos[i, 1]
                dvx = vel[j, 0] - vel[i, 0]
                dvy = vel[j, 1] - vel[i, 1]
                b = dx * dvx + dy * dvy
                if b >= 0.0:
                    continue
                a = dvx * dvx + dvy * dvy
                rr = radii[i] + radii[j]
                c = dx * dx + dy * dy - rr * rr
                disc = b * b - a * c
                if disc < 0.0:
                    continue
                t = (-b - math.sqrt(disc)) / a
                if t < 0.0:
                    t = 0.0
                if t < t_min:
                    t_min = t
                    kind = 1
                    ia = i
                    ib = j
        for i in range(n):
            pos[i, 0] += vel[i, 0] * t_min
            pos[i, 1] += vel[i, 1] * t_min
            for ax in range(2):
                if pos[i, ax] < radii[i]:
                    pos[i, ax] = radii[i]
                elif pos[i, ax] > 1.0 - radii[i]:
                    pos[i, ax] = 1.0 - radii[i]
        remaining -= t_min
        if kind == -1:
            break
        if kind == 0:
            vel[ia, ib] = -vel[ia, ib]
        else:
            dx = pos[ib, 0] - pos[ia, 0]
            dy = pos[ib, 1] - pos[ia, 1]
            d = math.sqrt(dx * dx + dy * dy)
            nx = dx / d
            ny = dy / d
            u = (vel[ib, 0] - vel[ia, 0]) * nx + (vel[ib, 1] - vel[ia, 1]) * ny
            mt = masses[ia] + masses[ib]
            ka = 2.0 * masses[ib] / mt * u
            kb = 2.0 * masses[ia] / mt * u
            vel[ia, 0] += ka * nx
            vel[ia, 1] += ka * ny
            vel[ib, 0] -= kb * nx
            vel[ib, 1] -= kb * ny
            if ia == tracked or ib == tracked:
                hits += 1
        if remaining <= 0.0:
            break
    return hits


@njit(cache=True)
def _in_contact(pos, radii, i):
    for j in range(pos.shape[0]):
        if j == i:
            continue
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        rr = radii[i] + radii[j] + 1e-9
        if dx * dx + dy * dy <= rr * rr:
            return True
    return False


@njit(cache=True)
def _controlled_advance(pos, vel, radii, masses, dt, action, impulse, directions):
    vel[0, 0] += impulse * directions[action, 0]
    vel[0, 1] += impulse * directions[action, 1]
    touching = _in_contact(pos, radii, 0)
    hits = _billiards_advance(pos, vel, radii, masses, dt, 0)
    if touching or hits > 0 or _in_contact(pos, radii, 0):
        return -1.0
    return 0.0


@njit(cache=True)
def _random_rollout(pos, vel, radii, masses, dt, actions, impulse, directions):
    total = 0.0
    for k in range(actions.shape[0]):
        total += _controlled_advance(pos, vel, radii, masses, dt, actions[k], impulse, directions)
    return total


@njit(cache=True)
def _gravity_advance(pos, vel, masses, dt, substeps, g_const, clip, basin):
    n = pos.shape[0]
    h = dt / substeps
    acc = np.zeros((n, 2))
    clip2 = clip * clip
    for _ in range(substeps):
        for i in range(n):
            acc[i, 0] = -basin * (pos[i, 0] - 0.5)
            acc[i, 1] = -basin * (pos[i, 1] - 0.5)
        for i in range(n):
            for j in range(i + 1, n):
                dx = pos[j, 0] - pos[i, 0]
                dy = pos[j, 1] - pos[i, 1]
                d2 = dx * dx + dy * dy
                d = math.sqrt(d2)
                if d == 0.0:
                    continue
                f = g_const * masses[i] * masses[j] / max(d2, clip2)
                fx = f * dx / d
                fy = f * dy / d
                acc[i, 0] += fx / masses[i]
                acc[i, 1] += fy / masses[i]
                acc[j, 0] -= fx / masses[j]
                acc[j, 1] -= fy / masses[j]
        for i in range(n):
            vel[i, 0] += acc[i, 0] * h
            vel[i, 1] += acc[i, 1] * h
            pos[i, 0] += vel[i, 0] * h
            pos[i, 1] += vel[i, 1] * h
    # centre-of-mass frame: zero momentum, COM pinned at the canvas centre
    mt = 0.0
    px = 0.0
    py = 0.0
    cx = 0.0
    cy = 0.0
    for i in range(n):
        mt += masses[i]
        px += masses[i] * vel[i, 0]
        py += masses[i] * vel[i, 1]
        cx += masses[i] * pos[i, 0]
        cy += masses[i] * pos[i, 1]
    for i in range(n):
        vel[i, 0] -= px / mt
        vel[i, 1] -= py / mt
        pos[i, 0] += 0.5 - cx / mt
        pos[i, 1] += 0.5 - cy / mt


# --------------------------------------------------------------------------
# public stepping API


def step_billiards(state: SimState, dt: float = 1.0) -> SimState:
    out = state.copy()
    _billiards_advance(out.positions, out.velocities, out.radii, out.masses, float(dt), -1)
    return out


def step_gravity(state: SimState, dt: float = 1.0, config: EnvConfig | None = None) -> SimState:
    config = config or default_config("gravity")
    out = state.copy()
    _gravity_advance(
        out.positions, out.velocities, out.masses, float(dt), int(config.substeps),
        float(config.gravity_const), float(config.clip_distance), float(config.basin_strength),
    )
    return out


def step_controlled(state: SimState, action: int, config: EnvConfig) -> tuple[SimState, float]:
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
    out = state.copy()
    reward = _controlled_advance(
        out.positions, out.velocities, out.radii, out.masses, float(config.dt),
        int(action), float(config.action_impulse), ACTION_DIRECTIONS,
    )
    return out, float(reward)


def random_rollout(state: SimState, actions: np.ndarray, config: EnvConfig) -> float:
    """Total reward of applying ``actions`` in sequence; ``state`` is left untouched."""
    out = state.copy()
    return float(_random_rollout(
        out.positions, out.velocities, out.radii, out.masses, float(config.dt),
        np.ascontiguousarray(actions, dtype=np.int64), float(config.action_impulse), ACTION_DIRECTIONS,
    ))


def step(state: SimState, config: EnvConfig, action: int | None = None) -> tuple[SimState, float]:
    """Dispatch on ``config.kind``; reward is 0 for the uncontrolled environments."""
    if config.kind == "billiards":
        return step_billiards(state, config.dt), 0.0
    if config.kind == "gravity":
        return step_gravity(state, config.dt, config), 0.0
    return step_controlled(state, REST_ACTION if action is None else action, config)


# --------------------------------------------------------------------------
# initial states


MAX_REJECTIONS = 100_000


def sample_positions(config: EnvConfig, rng: np.random.Generator, n_objects: int | None = None) -> np.ndarray:
    n = config.n_objects if n_objects is None else n_objects
    lo = config.radius + config.spawn_margin
    hi = 1.0 - lo
    if hi <= lo:
        raise ValueError("radius/margin leave no admissible region")
    min_d2 = (2 * config.radius) ** 2
    for _ in range(MAX_REJECTIONS):
        pos = rng.uniform(lo, hi, size=(n, 2))
        diff = pos[:, None, :] - pos[None, :, :]
        d2 = (diff ** 2).sum(-1)
        d2[np.diag_indices(n)] = np.inf
        if np.all(d2 >= min_d2):
            return pos
    raise RuntimeError(
        f"could not place {n} objects of radius {config.radius} without overlap "
        f"after {MAX_REJECTIONS} draws"
    )


def sample_initial_state(config: EnvConfig, rng: np.random.Generator, velocity_scale: float | None = None,
                         n_objects: int | None = None) -> SimState:
    n = config.n_objects if n_objects is None else n_objects
    scale = config.velocity_scale if velocity_scale is None else velocity_scale
    pos = sample_positions(config, rng, n)
    radii = np.full(n, config.radius)
    masses = np.full(n, config.mass)
    if config.kind == "gravity":
        offset = pos - 0.5
        tangent = np.stack([-offset[:, 1], offset[:, 0]], axis=1)
        norm = np.linalg.norm(tangent, axis=1, keepdims=True)
        tangent = np.divide(tangent, norm, out=np.zeros_like(tangent), where=norm > 0)
        sense = rng.choice([-1.0, 1.0])
        speed = scale * rng.uniform(0.5, 1.5, size=(n, 1))
        vel = sense * speed * tangent
        vel -= (masses[:, None] * vel).sum(0) / masses.sum()
        pos += 0.5 - (masses[:, None] * pos).sum(0) / masses.sum()
    else:
        vel = rng.normal(0.0, scale, size=(n, 2))
        # constant-energy convention: total KE = n * m * scale^2 (its expectation)
        target = n * config.mass * scale ** 2
        energy = 0.5 * (masses[:, None] * vel ** 2).sum()
        if energy > 0:
            vel *= math.sqrt(target / energy)
    return SimState(pos, vel, radii, masses)


# --------------------------------------------------------------------------
# energy


def kinetic_energy(positions: np.ndarray, t: int, masses: np.ndarray | None = None, dt: float = 1.0) -> float:
    """0.5 * sum_o m_o |p_t - p_{t-1}|^2 / dt^2 from a (T, O, 2) trajectory."""
    if t < 1:
        raise ValueError("kinetic energy needs t >= 1 (uses the previous frame)")
    positions = np.asarray(positions)
    diff = positions[t] - positions[t - 1]
    m = np.ones(diff.shape[0]) if masses is None else np.asarray(masses)
    return float(0.5 * (m * (diff ** 2).sum(-1)).sum() / dt ** 2)


def energy_series(positions: np.ndarray, masses: np.ndarray | None = None, dt: float = 1.0) -> np.ndarray:
    """Kinetic energy for t = 1..T-1 of a (..., T, O, 2) trajectory, vectorised."""
    positions = np.asarray(positions)
    diff = np.diff(positions, axis=-3)
    m = 1.0 if masses is None else np.asarray(masses)[..., None, :]
    return 0.5 * (m * (diff ** 2).sum(-1)).sum(-1) / dt ** 2


def velocity_energy(state: SimState) -> float:
    return float(0.5 * (state.masses[:, None] * state.velocities ** 2).sum())
