"""Rollout metrics, the linear baseline, energy statistics and report files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import ModelConfig, rollout_mean, state_from_truth
from .envs import Dataset, SimState, energy_series, render_frame
from .fusion import match_objects, run_filter, synthetic_detector
from .nnkit import ParamStore

N_GIVEN = 8
WINDOW = (9, 18)


@dataclass
class ErrorCurve:
    values: np.ndarray
    start: int = 1          # 1-indexed frame number of values[0]
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("error curve values must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start, self.start + len(self.values))


def matched_frame_error(pred: np.ndarray, truth: np.ndarray) -> float:
    perm = match_objects(truth, pred)
    return float(np.linalg.norm(pred[perm] - truth, axis=-1).mean())


def position_error_curve(pred: np.ndarray, truth: np.ndarray, start: int = 1, label: str = "") -> ErrorCurve:
    """Per-frame mean object distance under the best object matching.

    Accepts ``(T, O, 2)`` or a batch ``(N, T, O, 2)``; a batch is averaged over N.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, truth {truth.shape}")
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    errs = np.empty(pred.shape[:2])
    for n in range(pred.shape[0]):
        for t in range(pred.shape[1]):
            errs[n, t] = matched_frame_error(pred[n, t], truth[n, t])
    return ErrorCurve(errs.mean(axis=0), start, label)


def window_sum(curve: ErrorCurve, first: int = WINDOW[0], last: int = WINDOW[1]) -> float:
    """Sum of the curve over 1-indexed frames ``first..last`` inclusive."""
    lo = first - curve.start
    hi = last - curve.start + 1
    if lo < 0 or hi > len(curve) or hi <= lo:
        raise ValueError(
            f"window [{first}, {last}] not covered by curve frames "
            f"[{curve.start}, {curve.start + len(curve) - 1}]"
        )
    return float(curve.values[lo:hi].sum())


def linear_baseline_rollout(given: np.ndarray, steps: int, radius: float | np.ndarray = 0.1) -> np.ndarray:
    """Constant-velocity extrapolation from the last two given frames.

    A coordinate that reaches the admissible boundary ``[r, 1 - r]`` sticks
    there for the rest of the rollout.  ``given`` is (k, O, 2); returns
    (steps, O, 2).
    """
    given = np.asarray(given, dtype=np.float64)
    if given.shape[0] < 2:
        raise ValueError("linear baseline needs at least two given frames")
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64).reshape(-1, 1), given.shape[1:])
    lo, hi = r, 1.0 - r
    pos = given[-1].copy()
    vel = given[-1] - given[-2]
    stuck = np.zeros(pos.shape, dtype=bool)
    out = np.empty((steps,) + pos.shape)
    for t in range(steps):
        pos = np.where(stuck, pos, pos + vel)
        hit = (pos <= lo) | (pos >= hi)
        pos = np.clip(pos, lo, hi)
        stuck |= hit
        out[t] = pos
    return out


def pixel_mse_curve(pred: np.ndarray, truth: np.ndarray, radii: np.ndarray, resolution: int,
                    colors=None, start: int = 1, label: str = "") -> ErrorCurve:
    """Per-frame mean squared pixel error of rendered predictions.

    ``truth`` is either rendered frames (T, H, W[, 3]) or positions (T, O, 2).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    zeros = np.zeros(pred.shape[1:])
    masses = np.ones(pred.shape[1])
    truth_is_frames = truth.shape[1:3] != pred.shape[1:3] or truth.ndim != 3 or truth.shape[-1] != 2
    if truth_is_frames and truth.shape[1] != resolution:
        raise ValueError(f"frames have resolution {truth.shape[1]}, renderer uses {resolution}")
    vals = []
    for t in range(pred.shape[0]):
        img = render_frame(SimState(pred[t], zeros, radii, masses), resolution, colors)
        ref = truth[t] if truth_is_frames else render_frame(SimState(truth[t], zeros, radii, masses),
                                                           resolution, colors)
        vals.append(float(np.mean((img - ref) ** 2)))
    return ErrorCurve(np.array(vals), start, label)


# --------------------------------------------------------------------------
# energy


def least_squares_slope(y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def energy_report(positions: np.ndarray, reference_energy: float, masses: np.ndarray | None = None) -> dict:
    """Energy series of a trajectory (T, O, 2) or batch (N, T, O, 2).

    Returns the per-frame series (batch-averaged), its mean, the least-squares
    drift slope per frame and the largest relative deviation from
    ``reference_energy``.
    """
    positions = np.asarray(positions)
    if positions.shape[-3] < 2:
        raise ValueError("energy needs at least two frames")
    series = energy_series(positions, masses)
    if series.ndim == 2:
        series = series.mean(axis=0)
    return {
        "series": series,
        "mean": float(series.mean()),
        "drift": least_squares_slope(series),
        "max_rel_dev": float(np.max(np.abs(series - reference_energy)) / reference_energy),
    }


def energy_scatter_rows(true_energy: np.ndarray, observed: np.ndarray, predicted: np.ndarray,
                        short: int = 10, long: int = 100) -> np.ndarray:
    """Rows of (true energy, observed-window mean, short-horizon mean, long-horizon mean).

    ``observed`` is (N, k, O, 2) observed positions; ``predicted`` is
    (N, >=long+1, O, 2) starting with the last observed frame.
    """
    obs = energy_series(observed).mean(axis=-1)
    e_pred = energy_series(predicted)
    return np.stack([np.asarray(true_energy), obs, e_pred[:, :short].mean(-1), e_pred[:, :long].mean(-1)], axis=1)


def rolling_mean(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="valid")


# --------------------------------------------------------------------------
# model evaluation protocol


def model_rollout_from_truth(ds: Dataset, params: ParamStore, cfg: ModelConfig, steps: int,
                             n_given: int = N_GIVEN) -> np.ndarray:
    """Mean rollouts seeded with the ground-truth state at frame ``n_given``; (N, steps, O, 2)."""
    z0 = state_from_truth(ds.positions[:, n_given - 1], ds.velocities[:, n_given - 1], cfg.latent_dim)
    return rollout_mean(z0, steps, params, cfg)[..., 0:2]


def model_rollout_filtered(ds: Dataset, params: ParamStore, cfg: ModelConfig, steps: int,
                           noise: float, seed: int, n_given: int = N_GIVEN) -> tuple[np.ndarray, np.ndarray]:
    """Rollouts seeded by filtering ``n_given`` synthetic detections.

    Returns (filtered positions for frames 2..n_given, predicted positions).
    """
    rng = np.random.default_rng(seed)
    starts, observed = [], []
    for n in range(ds.n_sequences):
        dets = [synthetic_detector(ds.state(n, t), noise, rng) for t in range(n_given)]
        beliefs = run_filter(dets, params, cfg)
        starts.append(beliefs[-1].dynamics_mean())
        observed.append(np.stack([b.pos.mean for b in beliefs]))
    pred = rollout_mean(np.stack(starts), steps, params, cfg)[..., 0:2]
    return np.stack(observed), pred


def evaluate_positions(ds: Dataset, pred: np.ndarray, n_given: int = N_GIVEN, label: str = "") -> ErrorCurve:
    """Error curve for predictions of frames ``n_given+1 ..`` (1-indexed)."""
    steps = pred.shape[1]
    truth = ds.positions[:, n_given:n_given + steps]
    return position_error_curve(pred, truth, start=n_given + 1, label=label)


def linear_predictions(ds: Dataset, steps: int, n_given: int = N_GIVEN) -> np.ndarray:
    return np.stack([
        linear_baseline_rollout(ds.positions[n, :n_given], steps, ds.radii[n])
        for n in range(ds.n_sequences)
    ])


# --------------------------------------------------------------------------
# report files


def write_curves(path: str | Path, curves: list[ErrorCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "frame", "value"])
        for c in curves:
            for f, v in zip(c.frames, c.values):
                w.writerow([c.label, int(f), repr(float(v))])


def write_energy(path: str | Path, series: dict[str, np.ndarray], start: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "frame", "energy"])
        for label, s in series.items():
            for k, v in enumerate(s):
                w.writerow([label, start + k, repr(float(v))])


def write_svg(path: str | Path, curves: list[ErrorCurve], title: str = "") -> None:
    """Minimal line plot; the CSV next to it is the authoritative output."""
    width, height, pad = 480, 300, 40
    xs = np.concatenate([c.frames for c in curves]) if curves else np.array([0, 1])
    ys = np.concatenate([c.values for c in curves]) if curves else np.array([0, 1])
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y1 = float(ys.max()) or 1.0
    sx = lambda x: pad + (x - x0) / max(x1 - x0, 1e-12) * (width - 2 * pad)  # noqa: E731
    sy = lambda y: height - pad - y / y1 * (height - 2 * pad)  # noqa: E731
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for k, c in enumerate(curves):
        pts = " ".join(f"{sx(f):.1f},{sy(v):.1f}" for f, v in zip(c.frames, c.values))
        color = palette[k % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{pad + 14 * k}" font-size="11" fill="{color}">{c.label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


__all__ = [
    "ErrorCurve", "position_error_curve", "window_sum", "linear_baseline_rollout", "pixel_mse_curve",
    "energy_report", "energy_scatter_rows", "least_squares_slope", "rolling_mean",
    "model_rollout_from_truth", "model_rollout_filtered", "evaluate_positions", "linear_predictions",
    "write_curves", "write_energy", "write_svg", "matched_frame_error",
]
