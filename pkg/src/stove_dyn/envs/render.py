"""Anti-aliased disc rendering."""

from __future__ import annotations

import numpy as np

from .physics import OBJECT_COLORS, SimState


SUPERSAMPLE = 4


def render_frame(state: SimState, resolution: int, colors: np.ndarray | None = None,
                 intensity: float = 1.0) -> np.ndarray:
    """Draw each ball as a disc with coverage-weighted edge pixels.

    Coverage is the clipped signed distance ``r - d + 1/2`` measured on a
    4x4 sub-pixel grid and averaged per pixel, which keeps the total mass of a
    disc nearly independent of its sub-pixel offset.  Discs are composited
    additively and saturated at 1.  Returns ``(H, W)`` grayscale, or
    ``(H, W, 3)`` when ``colors`` is given (one RGB row per object; ``True``
    selects the built-in palette).  Row index grows with the y coordinate.
    """
    res = int(resolution)
    if colors is True:
        colors = OBJECT_COLORS[: state.n_objects]
    ss = SUPERSAMPLE
    fine = res * ss
    centers = (np.arange(fine) + 0.5) / fine
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    shape = (res, res) if colors is None else (res, res, 3)
    image = np.zeros(shape)
    for o in range(state.n_objects):
        x, y = state.positions[o]
        d = np.sqrt((xx - x) ** 2 + (yy - y) ** 2) * fine
        cover = np.clip(state.radii[o] * fine - d + 0.5, 0.0, 1.0)
        cover = cover.reshape(res, ss, res, ss).mean(axis=(1, 3)) * intensity
        if colors is None:
            image += cover
        else:
            image += cover[..., None] * np.asarray(colors[o])
    return np.minimum(image, 1.0)


def render_sequence(positions: np.ndarray, radii: np.ndarray, resolution: int,
                    colors: np.ndarray | None = None) -> np.ndarray:
    frames = []
    zeros = np.zeros_like(positions[0])
    masses = np.ones(len(radii))
    for p in positions:
        frames.append(render_frame(SimState(p, zeros, radii, masses), resolution, colors))
    return np.stack(frames)
