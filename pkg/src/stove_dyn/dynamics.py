"""Graph-network transition model with attention, action conditioning and a reward head.

Object state layout (18 dims): ``pos 0:2 | size 2:4 | velo 4:6 | latent 6:18``.
The network sees the 16-dim slice without size, ordered ``pos | velo | latent``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .nnkit import EVAL, EvalOps, ParamStore, glorot_uniform, load_params, save_params

POS = slice(0, 2)
SIZE = slice(2, 4)
VELO = slice(4, 6)
STD_FLOOR = 1e-4


@dataclass(frozen=True)
class ModelConfig:
    n_objects: int = 3
    latent_dim: int = 12
    conditioned: bool = False
    n_actions: int = 9
    action_enc: int = 4
    appearance_dim: int = 3
    mask_velocity: bool = False
    # fixed standardisation of the network input and of the predicted increments
    pos_center: float = 0.5
    pos_scale: float = 0.25
    velo_scale: float = 0.05

    @property
    def l(self) -> int:
        return 4 + self.latent_dim

    @property
    def input_dim(self) -> int:
        extra = self.action_enc + self.appearance_dim if self.conditioned else 0
        return self.l + extra

    @property
    def full_dim(self) -> int:
        return self.l + 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    l = cfg.l
    layers = [
        ("S1", (cfg.input_dim, 2 * l)),
        ("S2", (2 * l, 2 * l)),
        ("S3", (2 * l, 2 * l)),
        ("C2", (4 * l, 4 * l)),
        ("C3", (4 * l, 2 * l)),
        ("C4", (2 * l, 2 * l)),
        ("A1", (4 * l, 4 * l)),
        ("A2", (4 * l, 2 * l)),
        ("A3", (2 * l, 1)),
        ("D2", (2 * l, 2 * l)),
        ("D3", (2 * l, 2 * l)),
        ("D4", (4 * l, 2 * l)),
        ("D5", (2 * l, 2 * l)),
        ("Q", (2 * l, l)),          # proposal std head
        ("H1", (2 * l, 2 * l)),
        ("H2", (2 * l, l)),
        ("H4", (l, max(l // 2, 1))),
        ("H5", (max(l // 2, 1), max(l // 4, 1))),
        ("H6", (max(l // 4, 1), l)),
    ]
    if cfg.conditioned:
        layers.insert(0, ("ACT", (cfg.n_actions, cfg.n_objects * cfg.action_enc)))
    return layers


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    shapes = []
    for name, (fan_in, fan_out) in layer_shapes(cfg):
        shapes.append((f"{name}.w", (fan_in, fan_out)))
        shapes.append((f"{name}.b", (fan_out,)))
    params = ParamStore(shapes)
    glorot_uniform(params, rng, [f"{name}.w" for name, _ in layer_shapes(cfg)])
    return params


@dataclass
class ActionContext:
    actions: np.ndarray      # (B,) integer actions or (B, n_actions) one-hot
    appearance: np.ndarray   # (O, 3) or (B, O, 3)

    def one_hot(self, n_actions: int) -> np.ndarray:
        a = np.asarray(self.actions)
        if a.ndim == 2:
            return a.astype(np.float64)
        out = np.zeros((a.shape[0], n_actions))
        out[np.arange(a.shape[0]), a.astype(np.int64)] = 1.0
        return out


@dataclass
class Transition:
    mean: object            # (B, O, l) next pos | velo | latent
    std: object             # (B, O, l) generative std
    proposal_std: object    # (B, O, l) std used by the inference filter
    joint: object           # D1, (B, O, 2l), input to the reward head


def _dense(ops, x, name):
    return ops.affine(x, ops.param(f"{name}.w"), ops.param(f"{name}.b"))


def _standardisation(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Input shift and scale, and the scale of the predicted pos | velo increments.

    Per-step changes of position and velocity are both of the order of one
    velocity, so both increments use the velocity scale.
    """
    shift = np.zeros(cfg.l)
    shift[0:2] = cfg.pos_center
    scale = np.ones(cfg.l)
    scale[0:2] = cfg.pos_scale
    scale[2:4] = cfg.velo_scale
    return shift, scale, cfg.velo_scale


def _offdiag_mask(n: int) -> np.ndarray:
    return (1.0 - np.eye(n))[:, :, None]


def dynamics_forward(z, params: ParamStore | None, cfg: ModelConfig,
                     ctx: ActionContext | None = None, ops=None) -> Transition:
    """One transition step for a batch of object states ``z`` of shape (B, O, l).

    ``ops`` defaults to plain evaluation against ``params``; pass a
    :class:`~stove_dyn.nnkit.Tape` to record for backprop.
    """
    if ops is None:
        ops = EvalOps(params)
    zv = ops.value(z)
    if zv.ndim != 3 or zv.shape[-1] != cfg.l:
        raise ValueError(f"expected state of shape (B, O, {cfg.l}), got {zv.shape}")
    batch, n_obj = zv.shape[:2]
    if n_obj < 2:
        raise ValueError("dynamics needs at least two objects for the relational sum")

    shift, scale, step = _standardisation(cfg)
    x = ops.mul(ops.sub(z, shift), 1.0 / scale)
    if cfg.mask_velocity:
        keep = np.ones(cfg.l)
        keep[2:4] = 0.0
        x = ops.mul(x, keep)
    if cfg.conditioned:
        if ctx is None:
            raise ValueError("conditioned model needs an ActionContext")
        if n_obj != cfg.n_objects:
            raise ValueError(f"conditioned model was built for {cfg.n_objects} objects, got {n_obj}")
        one_hot = ops.const(ctx.one_hot(cfg.n_actions))
        emb = ops.reshape(_dense(ops, one_hot, "ACT"), (batch, n_obj, cfg.action_enc))
        app = np.broadcast_to(np.asarray(ctx.appearance, dtype=np.float64), (batch, n_obj, cfg.appearance_dim))
        x = ops.concat([x, emb, ops.const(app)], axis=-1)

    s1 = _dense(ops, x, "S1")
    s2 = ops.relu(_dense(ops, s1, "S2"))
    s3 = ops.add(s2, _dense(ops, s2, "S3"))

    c2 = ops.relu(ops.pair_affine(s1, ops.param("C2.w"), ops.param("C2.b")))
    c3 = ops.relu(_dense(ops, c2, "C3"))
    c4 = ops.add(c3, _dense(ops, c3, "C4"))

    a1 = ops.relu(ops.pair_affine(s1, ops.param("A1.w"), ops.param("A1.b")))
    a2 = ops.relu(_dense(ops, a1, "A2"))
    a3 = ops.exp(_dense(ops, a2, "A3"))

    r2 = ops.masked_sum(ops.mul(c4, a3), _offdiag_mask(n_obj), axis=2)
    d1 = ops.add(r2, s3)

    d2 = ops.tanh(_dense(ops, d1, "D2"))
    d3 = ops.add(d2, ops.tanh(_dense(ops, d2, "D3")))
    d4 = ops.tanh(_dense(ops, ops.concat([d3, s1], axis=-1), "D4"))
    d5 = ops.add(d4, _dense(ops, d4, "D5"))

    l = cfg.l
    # pos | velo are predicted as increments; the latent is emitted directly,
    # so it stays bounded instead of integrating over long rollouts
    kinematic = ops.add(ops.slice(z, 0, 4), ops.scale(ops.slice(d5, 0, 4), step))
    mean = ops.concat([kinematic, ops.slice(d5, 4, l)], axis=-1)
    std = ops.add(ops.softplus(ops.slice(d5, l, 2 * l)), STD_FLOOR)
    proposal_std = ops.add(ops.softplus(_dense(ops, d4, "Q")), STD_FLOOR)
    return Transition(mean, std, proposal_std, d1)


def reward_logits(joint, params: ParamStore | None, cfg: ModelConfig, ops=None):
    """H1 to H5 before the final sigmoid: (B, l) logits, each a collision vote."""
    if ops is None:
        ops = EvalOps(params)
    h1 = ops.relu(_dense(ops, joint, "H1"))
    h2 = _dense(ops, h1, "H2")
    h3 = ops.masked_sum(h2, 1.0, axis=1)   # order-independent sum over objects
    h4 = ops.relu(_dense(ops, h3, "H4"))
    h5 = ops.relu(_dense(ops, h4, "H5"))
    return _dense(ops, h5, "H6")


def reward_forward(joint, params: ParamStore | None, cfg: ModelConfig, ops=None):
    """Collision probability in (0, 1) for each batch element: mean of the l sigmoid outputs."""
    if ops is None:
        ops = EvalOps(params)
    h6 = ops.sigmoid(reward_logits(joint, params, cfg, ops))
    return ops.scale(ops.sum(h6, axis=-1), 1.0 / cfg.l)


# --------------------------------------------------------------------------
# state layout helpers


def dynamics_slice(full: np.ndarray) -> np.ndarray:
    """(…, 18) -> (…, 16): drop the size slice."""
    return np.concatenate([full[..., POS], full[..., VELO], full[..., 6:]], axis=-1)


def with_size(dyn: np.ndarray, size: np.ndarray) -> np.ndarray:
    """(…, 16) + (…, 2) -> (…, 18)."""
    size = np.broadcast_to(size, dyn.shape[:-1] + (2,))
    return np.concatenate([dyn[..., 0:2], size, dyn[..., 2:4], dyn[..., 4:]], axis=-1)


def state_from_truth(positions: np.ndarray, velocities: np.ndarray, latent_dim: int) -> np.ndarray:
    """Ground-truth (…, O, 2) positions/velocities -> (…, O, l) network state, zero latent."""
    latent = np.zeros(positions.shape[:-1] + (latent_dim,))
    return np.concatenate([positions, velocities, latent], axis=-1)


def rollout_mean(z_start: np.ndarray, steps: int, params: ParamStore, cfg: ModelConfig,
                 actions: np.ndarray | None = None, appearance: np.ndarray | None = None) -> np.ndarray:
    """Feed predicted means back as inputs for ``steps`` steps.

    ``z_start`` is (B, O, l) or (O, l); returns (B, steps, O, l) (batch axis
    dropped when the input had none).  ``actions`` is (B, steps) when the
    model is conditioned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    single = z_start.ndim == 2
    z = z_start[None] if single else z_start
    ops = EvalOps(params)
    out = np.empty((z.shape[0], steps) + z.shape[1:])
    for t in range(steps):
        ctx = None
        if cfg.conditioned:
            a = np.asarray(actions)
            a = a[None] if a.ndim == 1 and single else a
            ctx = ActionContext(a[:, t], appearance)
        z = dynamics_forward(z, params, cfg, ctx, ops).mean
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite state in rollout at step {t}")
        out[:, t] = z
    return out[0] if single else out


# --------------------------------------------------------------------------
# checkpoints


def save_model(path: str | Path, params: ParamStore, cfg: ModelConfig) -> None:
    path = Path(path)
    save_params(params, path)
    sidecar = json.loads(cfg.to_json())
    sidecar["l"] = cfg.l
    sidecar["enc"] = cfg.action_enc
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_model(path: str | Path) -> tuple[ParamStore, ModelConfig]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    meta.pop("l", None)
    meta.pop("enc", None)
    return load_params(path), ModelConfig.from_dict(meta)


__all__ = [
    "ModelConfig", "ActionContext", "Transition", "init_params", "layer_shapes",
    "dynamics_forward", "reward_forward", "reward_logits", "rollout_mean", "dynamics_slice", "with_size",
    "state_from_truth", "save_model", "load_model", "POS", "SIZE", "VELO",
]
