"""Frenet-frame sampling planner.

Candidates are quintic polynomial segments in (s, d) over a grid of
target lateral offsets, target speeds and durations, extended past their
own duration at constant speed and constant offset so every candidate
covers the full planning horizon. Candidates are filtered by dynamic
limits and by collision checks against static obstacles and a
constant-speed prediction of the other vehicle, then ranked by cost.
The prediction horizon is the planner's only negotiation knob: it is
supplied per call, usually by a learned policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import ReferencePath, box_corners_many, overlap_mask

_EPS = 1e-9
# Below this speed a velocity vector carries no usable direction; the pose
# falls back to the route tangent instead of spinning with numerical noise.
_HEADING_SPEED_MIN = 1e-3


def _wrap_angle(a):
    return np.mod(a + np.pi, 2.0 * np.pi) - np.pi


def _slewed_heading(xy, head0, max_curvature: float) -> np.ndarray:
    """Sample headings limited by yaw feasibility.

    The raw displacement direction can rotate arbitrarily fast at crawl
    speeds (two cubics from rest share a constant ratio, so the very
    first micro-step already points at their full shear angle). A real
    front-steered vehicle turns at most max_curvature radians per metre
    rolled, so the heading chases the direction of travel measured over
    at least _CURV_MIN_CHORD of arc, under that slew limit, starting
    from the vehicle's current pose. Until a sample has rolled that far
    the pose simply keeps its previous heading.
    """
    n, K = xy.shape[:2]
    delta = np.diff(xy, axis=1)
    chord = np.hypot(delta[..., 0], delta[..., 1])
    arc = np.concatenate([np.zeros((n, 1)), np.cumsum(chord, axis=1)], axis=1)
    heading = np.empty((n, K))
    heading[:, 0] = head0
    rows = np.arange(n)
    for k in range(1, K):
        prev = heading[:, k - 1]
        # Anchor: the latest earlier sample at least the minimum arc back.
        behind = arc[:, : k + 1] <= (arc[:, k] - _CURV_MIN_CHORD)[:, None]
        anchor = np.maximum(behind.sum(axis=1) - 1, 0)
        seen = behind[:, 0]
        span = xy[:, k] - xy[rows, anchor]
        tgt = np.where(seen, np.arctan2(span[:, 1], span[:, 0]), prev)
        lim = max_curvature * chord[:, k - 1] + _EPS
        heading[:, k] = prev + np.clip(_wrap_angle(tgt - prev), -lim, lim)
    return heading


@dataclass(frozen=True)
class PlannerLimits:
    max_accel: float = 3.0
    max_decel: float = 3.0
    max_speed: float = 8.0
    max_curvature: float = 0.5


@dataclass(frozen=True)
class CostWeights:
    jerk: float = 0.1
    duration: float = 1.0
    lateral: float = 1.0
    speed: float = 1.0


@dataclass(frozen=True)
class SamplingGrids:
    lateral_offsets: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    speed_fractions: tuple = (0.0, 0.25, 0.5, 1.0)
    durations: tuple = (2.0, 4.0, 6.0)


@dataclass
class FrenetState:
    s: float = 0.0
    s_dot: float = 0.0
    s_ddot: float = 0.0
    d: float = 0.0
    d_dot: float = 0.0
    d_ddot: float = 0.0


@dataclass
class QuinticSegment:
    """Quintic polynomial p(t) = sum c_k t^k on [0, duration]."""

    coeffs: np.ndarray
    duration: float

    def position(self, t):
        return _polyval(self.coeffs, np.asarray(t, dtype=float))

    def velocity(self, t):
        return _polyval(_derive(self.coeffs), np.asarray(t, dtype=float))

    def acceleration(self, t):
        return _polyval(_derive(_derive(self.coeffs)), np.asarray(t, dtype=float))

    def jerk(self, t):
        c = _derive(_derive(_derive(self.coeffs)))
        return _polyval(c, np.asarray(t, dtype=float))


def _polyval(coeffs, t):
    out = np.zeros_like(t, dtype=float) + coeffs[..., -1]
    for k in range(coeffs.shape[-1] - 2, -1, -1):
        out = out * t + coeffs[..., k]
    return out


def _derive(coeffs):
    n = coeffs.shape[-1]
    return coeffs[..., 1:] * np.arange(1, n)


def quintic_connect(start, end, duration: float) -> QuinticSegment:
    """Quintic joining (p, v, a) boundary conditions over the duration."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    c = _quintic_coeffs_batch(
        *[np.array([float(v)]) for v in (*start, *end)], np.array([float(duration)])
    )
    return QuinticSegment(c[0], float(duration))


def _quintic_coeffs_batch(p0, v0, a0, p1, v1, a1, T) -> np.ndarray:
    """Closed-form quintic boundary solve, batched; returns (n, 6)."""
    T2, T3 = T * T, T * T * T
    A = p1 - (p0 + v0 * T + 0.5 * a0 * T2)
    B = v1 - (v0 + a0 * T)
    C = a1 - a0
    c3 = (10.0 * A - 4.0 * B * T + 0.5 * C * T2) / T3
    c4 = (-15.0 * A + 7.0 * B * T - C * T2) / (T3 * T)
    c5 = (6.0 * A - 3.0 * B * T + 0.5 * C * T2) / (T3 * T2)
    return np.stack([p0, v0, 0.5 * a0, c3, c4, c5], axis=-1)


def _jerk_integral_batch(coeffs, T) -> np.ndarray:
    """Integral of squared jerk over [0, T] for quintic coefficients (n, 6)."""
    j0 = 6.0 * coeffs[:, 3]
    j1 = 24.0 * coeffs[:, 4]
    j2 = 60.0 * coeffs[:, 5]
    T2, T3, T4, T5 = T**2, T**3, T**4, T**5
    return (
        j0 * j0 * T
        + j0 * j1 * T2
        + (j1 * j1 / 3.0 + 2.0 * j0 * j2 / 3.0) * T3
        + 0.5 * j1 * j2 * T4
        + 0.2 * j2 * j2 * T5
    )


@dataclass
class CandidateTrajectory:
    """One sampled motion, evaluated on the shared horizon time grid."""

    index: int
    duration: float
    target_offset: float
    target_speed: float
    t: np.ndarray
    s: np.ndarray
    s_dot: np.ndarray
    s_ddot: np.ndarray
    d: np.ndarray
    d_dot: np.ndarray
    d_ddot: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    cost: float
    valid: bool
    fallback: bool = False
    lon_coeffs: Optional[np.ndarray] = None
    lat_coeffs: Optional[np.ndarray] = None
    length: float = 4.6
    width: float = 1.8
    _corners: Optional[np.ndarray] = field(default=None, repr=False)

    def corners(self) -> np.ndarray:
        if self._corners is None:
            self._corners = box_corners_many(self.x, self.y, self.heading, self.length, self.width)
        return self._corners

    def state_at(self, i: int) -> FrenetState:
        return FrenetState(
            s=float(self.s[i]),
            s_dot=max(0.0, float(self.s_dot[i])),
            s_ddot=float(self.s_ddot[i]),
            d=float(self.d[i]),
            d_dot=float(self.d_dot[i]),
            d_ddot=float(self.d_ddot[i]),
        )

    def pose_at(self, i: int):
        return float(self.x[i]), float(self.y[i]), float(self.heading[i]), float(self.speed[i])


@dataclass
class PredictedTrajectory:
    """Other-vehicle rollout; step i holds the footprint at t = (i + 1) dt."""

    corners: np.ndarray
    centers: np.ndarray
    horizon_steps: int


def check_dynamics(candidate: CandidateTrajectory, limits: PlannerLimits) -> bool:
    """True when every sample respects speed, acceleration and curvature limits."""
    xy = np.stack([candidate.x, candidate.y], axis=-1)
    return bool(
        _dynamics_mask(
            candidate.s_dot[None],
            candidate.s_ddot[None],
            candidate.d_dot[None],
            candidate.d_ddot[None],
            xy[None],
            limits,
        )[0]
    )


def _dynamics_mask(s_dot, s_ddot, d_dot, d_ddot, xy, limits: PlannerLimits) -> np.ndarray:
    ok = (s_dot >= -_EPS).all(axis=1) & (s_dot <= limits.max_speed + _EPS).all(axis=1)
    ok &= (s_ddot <= limits.max_accel + _EPS).all(axis=1)
    ok &= (s_ddot >= -limits.max_decel - _EPS).all(axis=1)
    ok &= (np.abs(d_ddot) <= limits.max_accel + _EPS).all(axis=1)
    # Wheels cannot move a vehicle sideways faster than it rolls forward;
    # the curvature check misses this because a pure side-slide is collinear.
    ok &= (np.abs(d_dot) <= np.maximum(s_dot, 0.0) + _EPS).all(axis=1)
    return ok & (_menger_curvature(xy) <= limits.max_curvature + _EPS).all(axis=1)


# Triples with chords below this length measure discretization noise
# (route resampling, crawl-speed jitter), not an arc the wheels trace;
# a quarter metre is far below one vehicle length, and sweeps built from
# sub-chord moves are caught by the accel and side-slip limits instead.
_CURV_MIN_CHORD = 0.25


def _menger_curvature(xy) -> np.ndarray:
    """Discrete curvature through consecutive sample triples; (n, k-2)."""
    a = xy[:, 1:-1] - xy[:, :-2]
    b = xy[:, 2:] - xy[:, 1:-1]
    c = xy[:, 2:] - xy[:, :-2]
    cross = np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    la = np.hypot(a[..., 0], a[..., 1])
    lb = np.hypot(b[..., 0], b[..., 1])
    lc = np.hypot(c[..., 0], c[..., 1])
    denom = la * lb * lc
    tiny = (la < _CURV_MIN_CHORD) | (lb < _CURV_MIN_CHORD) | (lc < _CURV_MIN_CHORD)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(tiny, 0.0, 2.0 * cross / np.where(tiny, 1.0, denom))
    return kappa


def trajectory_cost(candidate: CandidateTrajectory, weights: CostWeights, reference_speed: float) -> float:
    """Weighted sum of squared-jerk effort, duration, lateral deviation and
    terminal speed error against the reference speed."""
    T = np.array([candidate.duration])
    jerk = float(
        _jerk_integral_batch(candidate.lon_coeffs[None], T)[0]
        + _jerk_integral_batch(candidate.lat_coeffs[None], T)[0]
    )
    lat = float(np.mean(candidate.d**2))
    spd = (float(candidate.s_dot[-1]) - reference_speed) ** 2
    return (
        weights.jerk * jerk
        + weights.duration * candidate.duration
        + weights.lateral * lat
        + weights.speed * spd
    )


def collision_free(candidate: CandidateTrajectory, static_corners, prediction: Optional[PredictedTrajectory]) -> bool:
    """True when no sample of the candidate intersects a static obstacle and
    no time-aligned sample intersects the predicted other vehicle.

    Sample j of the candidate (at t = j dt) is compared against prediction
    step j - 1; the sample at t = 0 is not checked against the prediction
    because current separation was already established by the simulator.
    """
    corners = candidate.corners()
    centers = np.stack([candidate.x, candidate.y], axis=-1)
    radius = 0.5 * math.hypot(candidate.length, candidate.width)
    return _corners_clear(corners, centers, radius, static_corners, prediction)


def _corners_clear(corners, centers, radius, static_corners, prediction) -> bool:
    for sc in static_corners:
        s_center = sc.mean(axis=0)
        s_radius = float(np.max(np.hypot(*(sc - s_center).T)))
        near = np.hypot(*(centers - s_center).T) <= radius + s_radius
        if near.any():
            k = int(near.sum())
            if overlap_mask(corners[near], np.broadcast_to(sc, (k, 4, 2))).any():
                return False
    if prediction is not None and prediction.horizon_steps > 0:
        h = min(prediction.horizon_steps, corners.shape[0] - 1)
        own = corners[1 : h + 1]
        other = prediction.corners[:h]
        near = np.hypot(*(centers[1 : h + 1] - prediction.centers[:h]).T) <= 2.0 * radius + 0.5
        if near.any():
            if overlap_mask(own[near], other[near]).any():
                return False
    return True


class FrenetPlanner:
    """Samples, filters and ranks candidates along one reference path."""

    def __init__(
        self,
        route: ReferencePath,
        limits: PlannerLimits,
        weights: CostWeights,
        grids: SamplingGrids,
        vehicle_length: float = 4.6,
        vehicle_width: float = 1.8,
        step_dt: float = 0.2,
        horizon_steps: int = 30,
        reference_speed: float = 4.0,
        goal_s: Optional[float] = None,
        goal_decel: float = 1.5,
        goal_overshoot: float = 1.0,
    ) -> None:
        self.route = route
        self.limits = limits
        self.weights = weights
        self.grids = grids
        self.vehicle_length = vehicle_length
        self.vehicle_width = vehicle_width
        self.step_dt = step_dt
        self.horizon_steps = horizon_steps
        self.reference_speed = reference_speed
        self.goal_s = goal_s
        self.goal_decel = goal_decel
        self.goal_overshoot = goal_overshoot
        self._t = np.arange(horizon_steps + 1) * step_dt

    # -- sampling ---------------------------------------------------------

    def _current_heading(self, state: FrenetState) -> float:
        """Fallback pose heading when the caller has none: velocity
        direction when clearly moving, route tangent when parked. At
        crawl speeds the velocity direction is shear noise, so callers
        that track a pose should pass their own heading instead."""
        if math.hypot(state.s_dot, state.d_dot) > _HEADING_SPEED_MIN:
            _, t_hat, n_hat = self.route.to_world(state.s, state.d)
            v = t_hat[0] * state.s_dot + n_hat[0] * state.d_dot
            return math.atan2(v[1], v[0])
        return float(self.route.heading_at(state.s)[0])

    def _sample_arrays(self, state: FrenetState, current_heading: Optional[float] = None):
        g = self.grids
        if len(g.durations) == 0 or min(g.durations) <= 0:
            raise ValueError("sampling durations must be positive")
        n_d, n_v = len(g.lateral_offsets), len(g.speed_fractions)
        T = np.repeat(np.asarray(g.durations, dtype=float), n_v * n_d)
        v_frac = np.tile(np.repeat(np.asarray(g.speed_fractions, dtype=float), n_d), len(g.durations))
        d_tgt = np.tile(np.asarray(g.lateral_offsets, dtype=float), n_v * len(g.durations))
        n = T.shape[0]
        vref = np.full(n, self.reference_speed)
        if self.goal_s is not None:
            # Cap each candidate's terminal speed by what still allows a
            # goal_decel stop from the candidate's own end point. Solving
            # v1^2 = 2a(G - s1) with s1 = s + (s_dot + v1) T / 2 gives the
            # closed form below; evaluating the cap at the current s
            # instead would let long candidates coast past the goal.
            a = self.goal_decel
            gap = self.goal_s + self.goal_overshoot - state.s - 0.5 * T * state.s_dot
            arg = 0.25 * (a * T) ** 2 + 2.0 * a * gap
            v_cap = np.maximum(0.0, -0.5 * a * T + np.sqrt(np.maximum(arg, 0.0)))
            vref = np.minimum(vref, v_cap)
        v_tgt = v_frac * vref

        ones = np.ones(n)
        s1 = state.s + 0.5 * (state.s_dot + v_tgt) * T
        lon = _quintic_coeffs_batch(
            state.s * ones, state.s_dot * ones, state.s_ddot * ones, s1, v_tgt, 0.0 * ones, T
        )
        lat = _quintic_coeffs_batch(
            state.d * ones, state.d_dot * ones, state.d_ddot * ones, d_tgt, 0.0 * ones, 0.0 * ones, T
        )

        t = self._t[None, :]
        tq = np.minimum(t, T[:, None])
        ext = t > T[:, None]
        rem = np.where(ext, t - T[:, None], 0.0)

        lon_d1, lon_d2 = _derive(lon), _derive(_derive(lon))
        lat_d1, lat_d2 = _derive(lat), _derive(_derive(lat))
        s = _polyval(lon[:, None, :], tq) + np.where(ext, v_tgt[:, None] * rem, 0.0)
        s_dot = np.where(ext, v_tgt[:, None], _polyval(lon_d1[:, None, :], tq))
        s_ddot = np.where(ext, 0.0, _polyval(lon_d2[:, None, :], tq))
        d = _polyval(lat[:, None, :], tq)
        d_dot = np.where(ext, 0.0, _polyval(lat_d1[:, None, :], tq))
        d_ddot = np.where(ext, 0.0, _polyval(lat_d2[:, None, :], tq))

        xy_flat, t_hat, n_hat = self.route.to_world(s.ravel(), d.ravel())
        xy = xy_flat.reshape(n, -1, 2)
        vel = t_hat * s_dot.ravel()[:, None] + n_hat * d_dot.ravel()[:, None]
        speed = np.hypot(vel[:, 0], vel[:, 1]).reshape(n, -1)
        head0 = current_heading if current_heading is not None else self._current_heading(state)
        heading = _slewed_heading(xy, head0, self.limits.max_curvature)

        jerk = _jerk_integral_batch(lon, T) + _jerk_integral_batch(lat, T)
        cost = (
            self.weights.jerk * jerk
            + self.weights.duration * T
            + self.weights.lateral * np.mean(d * d, axis=1)
            + self.weights.speed * (s_dot[:, -1] - vref) ** 2
        )
        valid = _dynamics_mask(s_dot, s_ddot, d_dot, d_ddot, xy, self.limits)
        return {
            "T": T, "v_tgt": v_tgt, "d_tgt": d_tgt, "lon": lon, "lat": lat,
            "s": s, "s_dot": s_dot, "s_ddot": s_ddot,
            "d": d, "d_dot": d_dot, "d_ddot": d_ddot,
            "xy": xy, "speed": speed, "heading": heading,
            "cost": cost, "valid": valid,
        }

    def _wrap(self, arr, i: int) -> CandidateTrajectory:
        return CandidateTrajectory(
            index=i,
            duration=float(arr["T"][i]),
            target_offset=float(arr["d_tgt"][i]),
            target_speed=float(arr["v_tgt"][i]),
            t=self._t,
            s=arr["s"][i], s_dot=arr["s_dot"][i], s_ddot=arr["s_ddot"][i],
            d=arr["d"][i], d_dot=arr["d_dot"][i], d_ddot=arr["d_ddot"][i],
            x=arr["xy"][i, :, 0], y=arr["xy"][i, :, 1],
            heading=arr["heading"][i], speed=arr["speed"][i],
            cost=float(arr["cost"][i]),
            valid=bool(arr["valid"][i]),
            lon_coeffs=arr["lon"][i], lat_coeffs=arr["lat"][i],
            length=self.vehicle_length, width=self.vehicle_width,
        )

    def sample_candidates(
        self, state: FrenetState, current_heading: Optional[float] = None
    ) -> list[CandidateTrajectory]:
        """All grid candidates, unfiltered; dynamics feasibility is in .valid."""
        arr = self._sample_arrays(state, current_heading)
        return [self._wrap(arr, i) for i in range(arr["T"].shape[0])]

    # -- prediction -------------------------------------------------------

    def predict_other(
        self,
        other_route: ReferencePath,
        x: float,
        y: float,
        speed: float,
        horizon_steps: int,
        other_length: Optional[float] = None,
        other_width: Optional[float] = None,
    ) -> PredictedTrajectory:
        """Constant-speed rollout of the other vehicle along its own route,
        holding its current lateral offset."""
        h = int(horizon_steps)
        length = self.vehicle_length if other_length is None else other_length
        width = self.vehicle_width if other_width is None else other_width
        if h <= 0:
            empty = np.zeros((0, 4, 2))
            return PredictedTrajectory(empty, np.zeros((0, 2)), 0)
        s0, d0 = other_route.to_frenet(x, y)
        s = s0 + speed * self.step_dt * np.arange(1, h + 1)
        xy, _, _ = other_route.to_world(s, np.full(h, d0))
        heading = other_route.heading_at(s)
        corners = box_corners_many(xy[:, 0], xy[:, 1], heading, length, width)
        return PredictedTrajectory(corners, xy, h)

    # -- planning ---------------------------------------------------------

    def emergency_stop(
        self, state: FrenetState, current_heading: Optional[float] = None
    ) -> CandidateTrajectory:
        """Maximum-deceleration fallback used when no candidate survives."""
        t = self._t
        a = self.limits.max_decel
        v0 = max(0.0, state.s_dot)
        t_stop = v0 / a if a > 0 else 0.0
        tq = np.minimum(t, t_stop)
        s = state.s + v0 * tq - 0.5 * a * tq * tq
        s_dot = np.maximum(0.0, v0 - a * t)
        s_ddot = np.where(t < t_stop, -a, 0.0)

        # Lateral rates die with the rolling motion; letting them settle on
        # their own would slide the box sideways after the wheels stop.
        T_lat = max(self.step_dt, t_stop)
        lat = _quintic_coeffs_batch(
            *[np.array([v]) for v in (state.d, state.d_dot, state.d_ddot, state.d, 0.0, 0.0)],
            np.array([T_lat]),
        )
        tl = np.minimum(t, T_lat)
        d = _polyval(lat[0][None, :], tl[None, :])[0]
        d_dot = np.where(t > T_lat, 0.0, _polyval(_derive(lat)[0][None, :], tl[None, :])[0])
        d_ddot = np.where(t > T_lat, 0.0, _polyval(_derive(_derive(lat))[0][None, :], tl[None, :])[0])

        xy, t_hat, n_hat = self.route.to_world(s, d)
        vel = t_hat * s_dot[:, None] + n_hat * d_dot[:, None]
        speed = np.hypot(vel[:, 0], vel[:, 1])
        head0 = current_heading if current_heading is not None else self._current_heading(state)
        heading = _slewed_heading(xy[None], head0, self.limits.max_curvature)[0]
        zeros6 = np.zeros(6)
        return CandidateTrajectory(
            index=-1, duration=float(t[-1]), target_offset=state.d, target_speed=0.0,
            t=t, s=s, s_dot=s_dot, s_ddot=s_ddot, d=d, d_dot=d_dot, d_ddot=d_ddot,
            x=xy[:, 0], y=xy[:, 1], heading=heading, speed=speed,
            cost=math.inf, valid=True, fallback=True,
            lon_coeffs=zeros6, lat_coeffs=zeros6,
            length=self.vehicle_length, width=self.vehicle_width,
        )

    def plan(
        self,
        state: FrenetState,
        static_corners=(),
        prediction: Optional[PredictedTrajectory] = None,
        current_heading: Optional[float] = None,
    ) -> CandidateTrajectory:
        """Lowest-cost dynamically feasible collision-free candidate; ties
        break on generation index; falls back to an emergency stop.

        Collision filtering is batched across all candidates: a bounding
        circle prefilter picks out the few (candidate, sample) pairs close
        enough to an obstacle to matter and only those run the exact
        rectangle overlap test.
        """
        arr = self._sample_arrays(state, current_heading)
        ok = arr["valid"].copy()
        if not ok.any():
            return self.emergency_stop(state, current_heading)
        n, K = arr["s"].shape
        xy = arr["xy"]
        corners = box_corners_many(
            xy[..., 0].ravel(), xy[..., 1].ravel(), arr["heading"].ravel(),
            self.vehicle_length, self.vehicle_width,
        ).reshape(n, K, 4, 2)
        radius = 0.5 * math.hypot(self.vehicle_length, self.vehicle_width)
        blocked = np.zeros(n, dtype=bool)
        for sc in static_corners:
            c = sc.mean(axis=0)
            rs = float(np.max(np.hypot(sc[:, 0] - c[0], sc[:, 1] - c[1])))
            near = np.hypot(xy[..., 0] - c[0], xy[..., 1] - c[1]) <= radius + rs
            near &= (ok & ~blocked)[:, None]
            if near.any():
                rows, cols = np.nonzero(near)
                hit = overlap_mask(corners[rows, cols], np.broadcast_to(sc, (rows.size, 4, 2)))
                blocked[rows[hit]] = True
        if prediction is not None and prediction.horizon_steps > 0:
            h = min(prediction.horizon_steps, K - 1)
            oc = prediction.centers[:h]
            r_other = float(
                np.max(np.hypot(prediction.corners[0, :, 0] - oc[0, 0], prediction.corners[0, :, 1] - oc[0, 1]))
            )
            near = (
                np.hypot(xy[:, 1 : h + 1, 0] - oc[:, 0], xy[:, 1 : h + 1, 1] - oc[:, 1])
                <= radius + r_other
            )
            near &= (ok & ~blocked)[:, None]
            if near.any():
                rows, cols = np.nonzero(near)
                hit = overlap_mask(corners[rows, cols + 1], prediction.corners[cols])
                blocked[rows[hit]] = True
        ok &= ~blocked
        if not ok.any():
            return self.emergency_stop(state, current_heading)
        cost = np.where(ok, arr["cost"], np.inf)
        winner = int(np.lexsort((np.arange(n), cost))[0])
        cand = self._wrap(arr, winner)
        cand._corners = corners[winner]
        return cand
