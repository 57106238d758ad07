"""Temporal occupancy grids.

Binary grids rendered in the current ego frame: first axis forward,
second axis to the left, the ego sitting at the shared corner of the
four center cells. Cell i along an axis covers [(i - size/2) * res,
(i + 1 - size/2) * res). A cell is occupied only when it overlaps an
obstacle with positive area; grazing contact along a boundary does not
count, which keeps a vehicle sliding along the corridor wall from
painting the wall cells it merely touches.

A stack is four frames sampled one second apart (t-3s .. t), all drawn
relative to where the ego is NOW, so approaching traffic appears as a
blob marching through the grid. Steps before the episode start are
padded with the earliest snapshot.
"""

from __future__ import annotations

import math

import numpy as np

OPEN_EPS = 1e-6


def render_frame(
    obstacles,
    ego_x: float,
    ego_y: float,
    ego_heading: float,
    size: int = 84,
    resolution: float = 1.0,
) -> np.ndarray:
    """Render world-frame obstacle rectangles into one binary grid.

    obstacles: iterable of (4, 2) corner arrays. The ego's own footprint
    is excluded simply by not passing it.
    """
    grid = np.zeros((size, size), dtype=np.uint8)
    half = size // 2
    c, s = math.cos(ego_heading), math.sin(ego_heading)
    to_local = np.array([[c, -s], [s, c]])  # applied to row vectors
    offset = np.array([ego_x, ego_y])
    for corners in obstacles:
        local = (np.asarray(corners, dtype=float) - offset) @ to_local
        lo = local.min(axis=0)
        hi = local.max(axis=0)
        i0 = max(0, int(math.floor(lo[0] / resolution)) + half - 1)
        i1 = min(size - 1, int(math.ceil(hi[0] / resolution)) + half)
        j0 = max(0, int(math.floor(lo[1] / resolution)) + half - 1)
        j1 = min(size - 1, int(math.ceil(hi[1] / resolution)) + half)
        if i0 > i1 or j0 > j1:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        cx = (ii - half + 0.5) * resolution
        cy = (jj - half + 0.5) * resolution

        e1 = local[1] - local[0]
        e2 = local[2] - local[1]
        axes = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        for e in (e1, e2):
            n = np.array([-e[1], e[0]])
            norm = np.hypot(n[0], n[1])
            if norm > 0:
                axes.append(n / norm)
        keep = np.ones(ii.shape[0], dtype=bool)
        for axis in axes:
            op = local @ axis
            o_lo, o_hi = op.min(), op.max()
            cp = cx * axis[0] + cy * axis[1]
            h = 0.5 * resolution * (abs(axis[0]) + abs(axis[1]))
            keep &= np.minimum(o_hi, cp + h) - np.maximum(o_lo, cp - h) > OPEN_EPS
        grid[ii[keep], jj[keep]] = 1
    return grid


def build_stack(
    social_history,
    statics,
    ego_x: float,
    ego_y: float,
    ego_heading: float,
    size: int = 84,
    resolution: float = 1.0,
    spacing_steps: int = 5,
    frames: int = 4,
) -> np.ndarray:
    """Stack of past obstacle frames, oldest first, all in the current
    ego frame. social_history holds the social vehicle's footprint per
    simulator step up to and including the current one."""
    if len(social_history) == 0:
        raise ValueError("cannot build an occupancy stack from an empty history")
    current = len(social_history) - 1
    out = np.empty((frames, size, size), dtype=np.uint8)
    # The statics do not move between channels; render them once.
    base = render_frame(statics, ego_x, ego_y, ego_heading, size, resolution)
    prev_step = None
    for k in range(frames):
        step = max(0, current - (frames - 1 - k) * spacing_steps)
        if step == prev_step:
            out[k] = out[k - 1]
            continue
        moving = render_frame([social_history[step]], ego_x, ego_y, ego_heading, size, resolution)
        out[k] = base | moving
        prev_step = step
    return out


def window_side_m(size: int = 84, resolution: float = 1.0) -> float:
    """Side length of the square region a frame covers, in meters."""
    return size * resolution


def write_pgm(path, frame: np.ndarray) -> None:
    """Dump one binary frame as a PGM image for eyeballing."""
    data = (np.asarray(frame, dtype=np.uint8) * 255).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode())
        fh.write(data)
