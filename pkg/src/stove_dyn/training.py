"""Supervised training of the dynamics and reward models on ground-truth states."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dynamics import (
    ActionContext, ModelConfig, dynamics_forward, init_params, reward_logits, state_from_truth,
)
from .envs import OBJECT_COLORS, Dataset
from .nnkit import EVAL, AdamState, EvalOps, ParamStore, Tape, adam_update, lr_schedule

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch: int = 256
    window: int = 8
    seed: int = 0
    loss: str = "learned"          # "learned" | "fixed"
    fixed_sigma: float = 0.01
    horizon: int = 0               # 0 -> window - 1
    decay_every: float = 0.0       # optimizer steps per schedule unit; 0 -> steps / 83
    holdout_fraction: float = 0.1
    eval_every: int = 250
    train_proposal: bool = True
    reward_weight: float = 1.0
    latent_dim: int = 12
    mask_velocity: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")
        if self.loss not in ("learned", "fixed"):
            raise ValueError(f"unknown loss variant {self.loss!r}")
        if not 1 <= self.rollout_horizon <= self.window - 1:
            raise ValueError("horizon must lie in [1, window - 1]")

    @property
    def rollout_horizon(self) -> int:
        return self.horizon or self.window - 1

    @property
    def schedule_unit(self) -> float:
        return self.decay_every or max(self.steps / 83.0, 1.0)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    params: ParamStore
    model: ModelConfig
    history: list[dict] = field(default_factory=list)


# --------------------------------------------------------------------------
# losses


def gaussian_nll(mean, std, target, ops=EVAL):
    """Mean over every element of 0.5*((x - mu)/sigma)^2 + ln sigma + 0.5 ln 2pi.

    ``mean``/``std`` may be wider than ``target``; only the leading
    ``target.shape[-1]`` dims (pos | velo) are scored.
    """
    target = np.asarray(target, dtype=np.float64)
    k = target.shape[-1]
    sv = ops.value(std)
    mu = ops.slice(mean, 0, k)
    resid = ops.sub(mu, target)
    if np.ndim(sv) == 0:
        if not float(sv) > 0:
            raise ValueError("standard deviation must be positive")
        quad = ops.scale(ops.square(resid), 0.5 / float(sv) ** 2)
        return ops.add(ops.mean(quad), math.log(float(sv)) + HALF_LOG_2PI)
    if np.any(sv[..., :k] <= 0):
        raise ValueError("standard deviations must be positive")
    sigma = ops.slice(std, 0, k)
    inv = ops.mul(resid, _reciprocal(ops, sigma))
    quad = ops.scale(ops.square(inv), 0.5)
    return ops.add(ops.mean(ops.add(quad, ops.log(sigma))), HALF_LOG_2PI)


def _reciprocal(ops, x):
    # 1/x = exp(-log x), keeps the primitive set small
    return ops.exp(ops.scale(ops.log(x), -1.0))


def logit_cross_entropy(logits, labels, ops=EVAL):
    """Mean BCE of every logit column against the per-row label, as softplus(x) - y*x.

    ``logits`` is (B, K), ``labels`` is (B,).  Stays informative when a
    sigmoid saturates on the wrong side, unlike the cross-entropy of a mean
    of sigmoids.
    """
    labels = np.asarray(labels, dtype=np.float64)
    x = ops.value(logits)
    y = np.broadcast_to(labels[:, None], np.shape(x))
    return ops.mean(ops.sub(ops.softplus(logits), ops.mul(logits, y)))


def binary_cross_entropy(prob, labels, ops=EVAL, eps=1e-12):
    labels = np.asarray(labels, dtype=np.float64)
    log_p = ops.log(ops.add(prob, eps))
    log_q = ops.log(ops.add(ops.scale(prob, -1.0), 1.0 + eps))
    total = ops.add(ops.mul(log_p, labels), ops.mul(log_q, 1.0 - labels))
    return ops.scale(ops.mean(total), -1.0)


# --------------------------------------------------------------------------
# batches


def split_holdout(ds: Dataset, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n = ds.n_sequences
    n_hold = int(round(n * fraction)) if n > 1 else 0
    n_hold = min(n_hold, n - 1)
    idx = np.arange(n)
    return idx[: n - n_hold], idx[n - n_hold:]


@dataclass
class Batch:
    z0: np.ndarray                   # (B, O, l)
    targets: np.ndarray              # (B, H, O, 4) pos | velo
    actions: np.ndarray | None       # (B, H)
    rewards: np.ndarray | None       # (B, H)


def sample_batch(ds: Dataset, seqs: np.ndarray, size: int, window: int, horizon: int,
                 latent_dim: int, rng: np.random.Generator) -> Batch:
    n = rng.choice(seqs, size=size)
    start = rng.integers(0, ds.length - window + 1, size=size)
    frames = start[:, None] + np.arange(horizon + 1)[None, :]
    pos = ds.positions[n[:, None], frames]
    vel = ds.velocities[n[:, None], frames]
    z0 = state_from_truth(pos[:, 0], vel[:, 0], latent_dim)
    targets = np.concatenate([pos[:, 1:], vel[:, 1:]], axis=-1)
    actions = rewards = None
    if ds.actions is not None:
        actions = ds.actions[n[:, None], frames[:, :-1]]
        rewards = ds.rewards[n[:, None], frames[:, :-1]]
    return Batch(z0, targets, actions, rewards)


def _appearance(cfg: ModelConfig) -> np.ndarray:
    return OBJECT_COLORS[: cfg.n_objects]


def rollout_loss(batch: Batch, params: ParamStore, cfg: ModelConfig, tcfg: TrainConfig, ops):
    """Average over the horizon of the per-step NLL (plus reward BCE when conditioned)."""
    z = ops.const(batch.z0)
    total = None
    horizon = batch.targets.shape[1]
    for k in range(horizon):
        ctx = None
        if cfg.conditioned:
            ctx = ActionContext(batch.actions[:, k], _appearance(cfg))
        tr = dynamics_forward(z, params, cfg, ctx, ops)
        target = batch.targets[:, k]
        std = tcfg.fixed_sigma if tcfg.loss == "fixed" else tr.std
        term = gaussian_nll(tr.mean, std, target, ops)
        if tcfg.train_proposal:
            detached = ops.const(ops.value(tr.mean))
            term = ops.add(term, gaussian_nll(detached, tr.proposal_std, target, ops))
        if cfg.conditioned and batch.rewards is not None and tcfg.reward_weight > 0:
            logits = reward_logits(tr.joint, params, cfg, ops)
            bce = logit_cross_entropy(logits, -batch.rewards[:, k], ops)
            term = ops.add(term, ops.scale(bce, tcfg.reward_weight))
        total = term if total is None else ops.add(total, term)
        z = tr.mean
    return ops.scale(total, 1.0 / horizon)


def rollout_position_error(batch: Batch, params: ParamStore, cfg: ModelConfig) -> float:
    """Mean Euclidean position error over the horizon of a mean rollout (object order known)."""
    ops = EvalOps(params)
    z = batch.z0
    errs = []
    for k in range(batch.targets.shape[1]):
        ctx = ActionContext(batch.actions[:, k], _appearance(cfg)) if cfg.conditioned else None
        z = dynamics_forward(z, params, cfg, ctx, ops).mean
        errs.append(np.linalg.norm(z[..., :2] - batch.targets[:, k, :, :2], axis=-1).mean())
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# training loops


def _model_config(ds: Dataset, tcfg: TrainConfig, conditioned: bool) -> ModelConfig:
    return ModelConfig(n_objects=ds.n_objects, latent_dim=tcfg.latent_dim, conditioned=conditioned,
                       mask_velocity=tcfg.mask_velocity,
                       pos_center=float(ds.positions.mean()),
                       pos_scale=float(ds.positions.std()),
                       velo_scale=float(ds.velocities.std()))


def _train(ds: Dataset, tcfg: TrainConfig, conditioned: bool, params: ParamStore | None = None,
           progress=None) -> TrainResult:
    if ds.length < tcfg.window:
        raise ValueError(f"sequences of length {ds.length} are shorter than the window {tcfg.window}")
    cfg = _model_config(ds, tcfg, conditioned)
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_params(cfg, rng)
    train_idx, hold_idx = split_holdout(ds, tcfg.holdout_fraction)
    horizon = tcfg.rollout_horizon
    hold_rng = np.random.default_rng([tcfg.seed, 1])
    hold_batch = None
    if len(hold_idx):
        hold_batch = sample_batch(ds, hold_idx, min(512, 8 * len(hold_idx)), tcfg.window, horizon,
                                  cfg.latent_dim, hold_rng)
    state = AdamState.zeros(params)
    history: list[dict] = []
    for step in range(tcfg.steps):
        batch = sample_batch(ds, train_idx, tcfg.batch, tcfg.window, horizon, cfg.latent_dim, rng)
        tape = Tape(params)
        loss = rollout_loss(batch, params, cfg, tcfg, tape)
        value = float(loss.value)
        if not math.isfinite(value):
            raise FloatingPointError(f"training diverged at step {step}: loss {value}")
        grads = tape.backprop(loss)
        adam_update(params, grads, state, lr_schedule(step / tcfg.schedule_unit))
        if step % tcfg.eval_every == 0 or step == tcfg.steps - 1:
            hold_err = rollout_position_error(hold_batch, params, cfg) if hold_batch else float("nan")
            history.append({"step": step, "train_nll": value, "holdout_pos_err": hold_err})
            log.info("step %d  loss %.5f  holdout err %.5f", step, value, hold_err)
            if progress is not None:
                progress(history[-1])
    return TrainResult(params, cfg, history)


def train_dynamics_supervised(ds: Dataset, tcfg: TrainConfig, params: ParamStore | None = None,
                              progress=None) -> TrainResult:
    """Train on ground-truth windows with multi-step mean rollouts through the window."""
    return _train(ds, tcfg, conditioned=False, params=params, progress=progress)


def train_reward_model(ds: Dataset, tcfg: TrainConfig, params: ParamStore | None = None,
                       progress=None) -> TrainResult:
    """Joint action-conditioned dynamics NLL + collision BCE on a control dataset."""
    if ds.actions is None or ds.rewards is None:
        raise ValueError("reward training needs a dataset with actions and rewards")
    return _train(ds, tcfg, conditioned=True, params=params, progress=progress)


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_nll", "holdout_pos_err"])
        for row in history:
            writer.writerow([row["step"], repr(row["train_nll"]), repr(row["holdout_pos_err"])])


def config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
