"""Planar geometry primitives: oriented boxes, separating-axis overlap
tests, and polyline reference paths with Frenet-frame conversions.

Everything here is pure numpy and shared by the simulator, the planner
and the occupancy renderer.
"""

from __future__ import annotations

import math

import numpy as np


def box_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, shape (4, 2)."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def box_corners_many(x, y, heading, length: float, width: float) -> np.ndarray:
    """Vectorized box_corners for pose arrays; returns (n, 4, 2)."""
    x = np.asarray(x, dtype=float)
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    lx = np.array([hl, -hl, -hl, hl])
    ly = np.array([hw, hw, -hw, -hw])
    cx = x[:, None] + lx[None, :] * c[:, None] - ly[None, :] * s[:, None]
    cy = np.asarray(y, dtype=float)[:, None] + lx[None, :] * s[:, None] + ly[None, :] * c[:, None]
    return np.stack([cx, cy], axis=-1)


def _edge_normals(corners: np.ndarray) -> np.ndarray:
    # Two unique edge normals per rectangle; unnormalized is fine for
    # interval-overlap comparisons. corners: (n, 4, 2) -> (n, 2, 2).
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 1]
    edges = np.stack([e1, e2], axis=1)
    return np.stack([-edges[..., 1], edges[..., 0]], axis=-1)


def overlap_mask(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Closed-set overlap test for paired oriented rectangles.

    corners_a, corners_b: (n, 4, 2). Returns (n,) bool where True means
    the closed rectangles intersect (touching boundaries count).
    """
    axes = np.concatenate([_edge_normals(corners_a), _edge_normals(corners_b)], axis=1)
    proj_a = np.einsum("naf,ncf->nac", axes, corners_a)
    proj_b = np.einsum("naf,ncf->nac", axes, corners_b)
    lo_a, hi_a = proj_a.min(axis=2), proj_a.max(axis=2)
    lo_b, hi_b = proj_b.min(axis=2), proj_b.max(axis=2)
    separated = (hi_a < lo_b) | (hi_b < lo_a)
    return ~separated.any(axis=1)


def boxes_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Closed-set overlap of two single rectangles given as (4, 2) corners."""
    return bool(overlap_mask(corners_a[None], corners_b[None])[0])


def round_corners(points, radius: float, spacing: float = 0.25) -> np.ndarray:
    """Replace interior corners of a polyline with sampled circular fillets.

    Each interior vertex becomes an arc of the given radius tangent to both
    legs, sampled roughly every `spacing` metres, so discrete curvature
    estimates along the result stay near 1/radius instead of spiking at the
    original kink. The radius is reduced where short legs cannot host the
    full fillet.
    """
    pts = np.asarray(points, dtype=float)
    if radius <= 0 or pts.shape[0] < 3:
        return pts
    out = [pts[0]]
    for i in range(1, pts.shape[0] - 1):
        prev_leg = pts[i] - pts[i - 1]
        next_leg = pts[i + 1] - pts[i]
        lp, ln = np.hypot(*prev_leg), np.hypot(*next_leg)
        u, w = prev_leg / lp, next_leg / ln
        cross = u[0] * w[1] - u[1] * w[0]
        theta = math.atan2(abs(cross), float(np.dot(u, w)))
        if theta < 1e-4:
            out.append(pts[i])
            continue
        t = min(radius * math.tan(0.5 * theta), 0.4 * lp, 0.4 * ln)
        r_eff = t / math.tan(0.5 * theta)
        sign = 1.0 if cross > 0 else -1.0
        start = pts[i] - u * t
        center = start + sign * r_eff * np.array([-u[1], u[0]])
        phi0 = math.atan2(start[1] - center[1], start[0] - center[0])
        k = max(2, int(math.ceil(r_eff * theta / spacing)))
        phi = phi0 + sign * theta * np.arange(k + 1) / k
        arc = center + r_eff * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        out.extend(arc)
    out.append(pts[-1])
    return np.asarray(out)


class ReferencePath:
    """Piecewise-linear reference path with arc-length parameterization.

    Supports world <-> Frenet conversions. s is arc length from the first
    point, d is the signed lateral offset (positive to the left of travel).
    Queries beyond either end extrapolate along the end segments, so a
    vehicle may roll past the last waypoint without special-casing.
    A positive corner_radius rounds interior corners first; planners that
    enforce a curvature bound need kink-free paths at every speed.
    """

    def __init__(self, points, corner_radius: float = 0.0) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("reference path needs at least two (x, y) points")
        if corner_radius > 0:
            pts = round_corners(pts, corner_radius)
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("reference path has a zero-length segment")
        self.points = pts
        self.seg_len = seg_len
        self.s_knots = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.s_knots[-1])
        self.tangents = seg / seg_len[:, None]
        self.normals = np.stack([-self.tangents[:, 1], self.tangents[:, 0]], axis=1)
        self.headings = np.arctan2(self.tangents[:, 1], self.tangents[:, 0])

    def _segment_index(self, s) -> np.ndarray:
        idx = np.searchsorted(self.s_knots, s, side="right") - 1
        return np.clip(idx, 0, len(self.seg_len) - 1)

    def to_world(self, s, d):
        """Map Frenet (s, d) arrays to world points; returns (xy, tangent, normal)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        d = np.atleast_1d(np.asarray(d, dtype=float))
        idx = self._segment_index(s)
        base = self.points[idx]
        t_hat = self.tangents[idx]
        n_hat = self.normals[idx]
        along = (s - self.s_knots[idx])[:, None]
        xy = base + t_hat * along + n_hat * d[:, None]
        return xy, t_hat, n_hat

    def heading_at(self, s) -> np.ndarray:
        return self.headings[self._segment_index(np.atleast_1d(s))]

    def to_frenet(self, x: float, y: float) -> tuple[float, float]:
        """Project a world point onto the path; returns (s, signed d)."""
        p = np.array([x, y])
        rel = p - self.points[:-1]
        proj = np.einsum("ij,ij->i", rel, self.tangents)
        proj = np.clip(proj, 0.0, self.seg_len)
        foot = self.points[:-1] + self.tangents * proj[:, None]
        dist2 = np.sum((p - foot) ** 2, axis=1)
        k = int(np.argmin(dist2))
        # Allow extrapolation beyond the ends of the terminal segments.
        along = float(np.dot(p - self.points[k], self.tangents[k]))
        if 0 < k < len(self.seg_len) - 1:
            along = float(np.clip(along, 0.0, self.seg_len[k]))
        s = float(self.s_knots[k] + along)
        d = float(np.dot(p - self.points[k], self.normals[k]))
        return s, d
