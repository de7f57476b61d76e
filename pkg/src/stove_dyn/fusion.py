"""State filtering by fusing dynamics proposals with (synthetic) detections."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ActionContext, ModelConfig, dynamics_forward
from .envs import SimState
from .nnkit import ParamStore


@dataclass
class GaussianBelief:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} differ in shape")

    def __getitem__(self, index) -> "GaussianBelief":
        return GaussianBelief(self.mean[index], self.std[index])


def product_of_gaussians(a: GaussianBelief, b: GaussianBelief) -> GaussianBelief:
    """Renormalised product of two diagonal Gaussians: precisions add."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"cannot fuse beliefs of shape {a.mean.shape} and {b.mean.shape}")
    va = a.std ** 2
    vb = b.std ** 2
    mean = (vb * a.mean + va * b.mean) / (va + vb)
    var = 1.0 / (1.0 / va + 1.0 / vb)
    return GaussianBelief(mean, np.sqrt(var))


def velocity_belief(pos_t: GaussianBelief, pos_prev: GaussianBelief) -> GaussianBelief:
    """Velocity from the difference of two position beliefs; variances add."""
    return GaussianBelief(pos_t.mean - pos_prev.mean, np.sqrt(pos_t.std ** 2 + pos_prev.std ** 2))


# --------------------------------------------------------------------------
# assignment


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment of a square matrix, O(n^3).

    Shortest-augmenting-path form with row/column potentials.  Returns
    ``col`` with ``col[i]`` the column assigned to row ``i``.  Strict
    comparisons make ties resolve towards lower column indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col


def match_objects(reference: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    """Permutation ``pi`` minimising sum_o |reference[o] - proposals[pi[o]]|."""
    reference = np.asarray(reference, dtype=np.float64)
    proposals = np.asarray(proposals, dtype=np.float64)
    if reference.shape != proposals.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {proposals.shape}")
    cost = np.linalg.norm(reference[:, None, :] - proposals[None, :, :], axis=-1)
    return hungarian(cost)


# --------------------------------------------------------------------------
# detections


@dataclass
class DetectionSet:
    pos: GaussianBelief    # (O, 2)
    size: GaussianBelief   # (O, 2)
    appearance: np.ndarray | None = None   # (O, 3) colour code per detection

    def reorder(self, perm: np.ndarray) -> "DetectionSet":
        app = None if self.appearance is None else self.appearance[perm]
        return DetectionSet(self.pos[perm], self.size[perm], app)


MIN_DETECTION_STD = 1e-6


def synthetic_detector(state: SimState, noise: float, rng: np.random.Generator,
                       colors: np.ndarray | None = None) -> DetectionSet:
    """True positions and sizes plus i.i.d. Gaussian noise, in a random object order.

    ``colors`` (O, 3) attaches each object's appearance code to its detection.
    """
    if noise < 0:
        raise ValueError("detector noise must be >= 0")
    n = state.n_objects
    order = rng.permutation(n)
    size = np.repeat(2.0 * state.radii[:, None], 2, axis=1)
    pos_mean = state.positions + rng.normal(0.0, 1.0, size=(n, 2)) * noise
    size_mean = size + rng.normal(0.0, 1.0, size=(n, 2)) * noise
    std = np.full((n, 2), max(noise, MIN_DETECTION_STD))
    app = None if colors is None else np.asarray(colors, dtype=np.float64)[order]
    return DetectionSet(GaussianBelief(pos_mean[order], std), GaussianBelief(size_mean[order], std.copy()), app)


# --------------------------------------------------------------------------
# filtering


@dataclass
class StateBelief:
    """Per-object belief split by slice; a slice that is not yet known is ``None``."""

    pos: GaussianBelief
    size: GaussianBelief
    velo: GaussianBelief | None = None
    latent: GaussianBelief | None = None
    # detector position belief at this frame, in this belief's object order
    observed_pos: GaussianBelief | None = None
    appearance: np.ndarray | None = None

    def reorder(self, perm: np.ndarray) -> "StateBelief":
        pick = lambda b: None if b is None else b[perm]  # noqa: E731
        app = None if self.appearance is None else self.appearance[perm]
        return StateBelief(self.pos[perm], self.size[perm], pick(self.velo), pick(self.latent),
                           pick(self.observed_pos), app)

    def dynamics_mean(self) -> np.ndarray:
        """(O, 16) network input: pos | velo | latent."""
        if self.velo is None or self.latent is None:
            raise ValueError("belief has no velocity/latent slice yet")
        return np.concatenate([self.pos.mean, self.velo.mean, self.latent.mean], axis=-1)

    def full_mean(self) -> np.ndarray:
        return np.concatenate([self.pos.mean, self.size.mean, self.velo.mean, self.latent.mean], axis=-1)

    def full_std(self) -> np.ndarray:
        return np.concatenate([self.pos.std, self.size.std, self.velo.std, self.latent.std], axis=-1)


def initialize_beliefs(det_0: DetectionSet, det_1: DetectionSet, latent_dim: int = 12) -> StateBelief:
    """Belief at t=1 from the first two detections.

    Frame 1 is matched to frame 0, velocity comes from the position
    difference, and the latent slice is the standard-normal prior.
    """
    perm = match_objects(det_0.pos.mean, det_1.pos.mean)
    det_1 = det_1.reorder(perm)
    n = det_1.pos.mean.shape[0]
    velo = velocity_belief(det_1.pos, det_0.pos)
    latent = GaussianBelief(np.zeros((n, latent_dim)), np.ones((n, latent_dim)))
    return StateBelief(det_1.pos, det_1.size, velo, latent, observed_pos=det_1.pos, appearance=det_1.appearance)


def filter_step(prev: StateBelief, detection: DetectionSet, params: ParamStore, cfg: ModelConfig,
                ctx: ActionContext | None = None, perm: np.ndarray | None = None) -> StateBelief:
    """Propagate ``prev`` through the dynamics model and fuse with ``detection``.

    ``perm`` overrides the Hungarian matching (used by oracle-matched runs).
    """
    if prev.observed_pos is None:
        raise ValueError("previous belief carries no detection to difference against")
    z = prev.dynamics_mean()[None]
    tr = dynamics_forward(z, params, cfg, ctx)
    mean, std = tr.mean[0], tr.proposal_std[0]
    if perm is None:
        perm = match_objects(mean[:, 0:2], detection.pos.mean)
    det = detection.reorder(perm)
    img_velo = velocity_belief(det.pos, prev.observed_pos)
    pos = product_of_gaussians(GaussianBelief(mean[:, 0:2], std[:, 0:2]), det.pos)
    velo = product_of_gaussians(GaussianBelief(mean[:, 2:4], std[:, 2:4]), img_velo)
    latent = GaussianBelief(mean[:, 4:], std[:, 4:])
    app = prev.appearance if det.appearance is None else det.appearance
    return StateBelief(pos, det.size, velo, latent, observed_pos=det.pos, appearance=app)


def run_filter(detections: list[DetectionSet], params: ParamStore, cfg: ModelConfig,
               actions: np.ndarray | None = None, appearance: np.ndarray | None = None) -> list[StateBelief]:
    """Beliefs for frames 1..len(detections)-1.

    ``actions[t]`` is the action applied between frames t and t+1.
    """
    if len(detections) < 2:
        raise ValueError("filtering needs at least two detections")
    beliefs = [initialize_beliefs(detections[0], detections[1], cfg.latent_dim)]
    for t in range(2, len(detections)):
        ctx = None
        if cfg.conditioned:
            ctx = ActionContext(np.array([actions[t - 1]]), appearance)
        beliefs.append(filter_step(beliefs[-1], detections[t], params, cfg, ctx))
    return beliefs


def write_trace(beliefs: list[StateBelief], path: str | Path, start: int = 1) -> None:
    """CSV rows ``t, object, slice, mean, std`` (slice = pos0, size1, velo0, latent7, ...)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "object", "slice", "mean", "std"])
        for k, b in enumerate(beliefs):
            for name in ("pos", "size", "velo", "latent"):
                part = getattr(b, name)
                if part is None:
                    continue
                for o in range(part.mean.shape[0]):
                    for d in range(part.mean.shape[1]):
                        w.writerow([start + k, o, f"{name}{d}", repr(float(part.mean[o, d])),
                                    repr(float(part.std[o, d]))])


__all__ = [
    "GaussianBelief", "DetectionSet", "StateBelief", "product_of_gaussians", "velocity_belief",
    "hungarian", "match_objects", "synthetic_detector", "initialize_beliefs", "filter_step",
    "run_filter", "write_trace",
]
