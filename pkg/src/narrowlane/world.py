"""Two-vehicle narrow-corridor world.

The road runs along x with the centerline at y = 0. Parked vehicles
narrow the middle stretch to a single free band that only one moving
vehicle fits through, so opposing vehicles must negotiate passage order.
The ego enters travelling +x from the right-hand lane (y < 0), the
social vehicle opposes it (-x, mirrored lane). Both follow fixed
reference routes that funnel into the corridor centerline and peel back
into their lanes on the far side.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import ReferencePath, box_corners, boxes_overlap
from .planner import CandidateTrajectory, FrenetState

LOG_COLUMNS = (
    "step", "t", "ego_x", "ego_y", "ego_speed",
    "social_x", "social_y", "social_speed",
    "action_horizon_s", "reward", "outcome",
)

RUNNING, COLLISION, BOTH_REACHED, TIMEOUT = "running", "collision", "both_reached", "timeout"

REWARD_STEP = -0.25
REWARD_COLLISION = -5.0
REWARD_SUCCESS = 10.0


@dataclass(frozen=True)
class CorridorMap:
    lane_width: float
    corridor_free_width: float
    corridor_length: float
    vehicle_length: float
    vehicle_width: float
    corridor_x: tuple
    corridor_entry_s: float
    corridor_exit_s: float
    social_entry_s: float
    social_exit_s: float
    ego_target_s: float
    social_target_s: float
    hold_line_x: float
    ego_hold_s: float
    social_hold_s: float
    centerline: np.ndarray
    ego_route: ReferencePath
    social_route: ReferencePath
    static_obstacles: tuple


def build_map(
    lane_width: float = 6.0,
    corridor_free_width: float = 3.0,
    corridor_length: float = 10.0,
    vehicle_length: float = 4.6,
    vehicle_width: float = 1.8,
    clearance_margin: float = 0.5,
    taper_length: float = 8.0,
    taper_setback: float = 3.0,
    ego_target_margin: float = 12.0,
    social_target_margin: float = 6.0,
    road_half_length: float = 40.0,
    hold_line_x: float = 13.5,
    corner_radius: float = 4.0,
) -> CorridorMap:
    """Build the corridor scene and both reference routes.

    The free band must admit exactly one vehicle: wide enough for a
    vehicle plus clearance on both sides, narrower than two vehicles
    abreast. Anything else is not a negotiation scene and is rejected.
    """
    min_free = vehicle_width + 2.0 * clearance_margin
    max_free = 2.0 * vehicle_width
    if not (min_free <= corridor_free_width < max_free):
        raise ValueError(
            f"corridor free width {corridor_free_width} must lie in "
            f"[{min_free}, {max_free}) to force single-file passage"
        )
    if corridor_free_width >= lane_width:
        raise ValueError("free width must leave room for parked vehicles")
    if corridor_length <= vehicle_length:
        raise ValueError("corridor must be longer than one vehicle")

    half_corridor = 0.5 * corridor_length
    lane_offset = 0.25 * lane_width
    strip_width = 0.5 * (lane_width - corridor_free_width)
    strip_center = 0.5 * corridor_free_width + 0.5 * strip_width
    turn_in = half_corridor + taper_setback
    turn_start = turn_in + taper_length

    # Two parked blocks per side with a small central gap.
    gap = 0.4
    block_len = 0.5 * (corridor_length - gap)
    block_x = 0.5 * gap + 0.5 * block_len
    statics = tuple(
        box_corners(sx, sy, 0.0, block_len, strip_width)
        for sx in (-block_x, block_x)
        for sy in (strip_center, -strip_center)
    )

    ego_route = ReferencePath([
        (-road_half_length, -lane_offset),
        (-turn_start, -lane_offset),
        (-turn_in, 0.0),
        (turn_in, 0.0),
        (turn_start, -lane_offset),
        (road_half_length, -lane_offset),
    ], corner_radius=corner_radius)
    social_route = ReferencePath([
        (road_half_length, lane_offset),
        (turn_start, lane_offset),
        (turn_in, 0.0),
        (-turn_in, 0.0),
        (-turn_start, lane_offset),
        (-road_half_length, lane_offset),
    ], corner_radius=corner_radius)

    entry_s, _ = ego_route.to_frenet(-half_corridor, 0.0)
    exit_s, _ = ego_route.to_frenet(half_corridor, 0.0)
    s_entry_s, _ = social_route.to_frenet(half_corridor, 0.0)
    s_exit_s, _ = social_route.to_frenet(-half_corridor, 0.0)

    # Waiting line for whoever yields the bottleneck: far enough out that
    # the lanes have started to separate, close enough that a held vehicle
    # still commands the merge. Distances to this plane decide who goes
    # first, so it must sit outside the walled section.
    if hold_line_x <= half_corridor:
        raise ValueError("hold line must sit outside the walled corridor")
    hold_frac = min(max((hold_line_x - turn_in) / taper_length, 0.0), 1.0)
    hold_y = lane_offset * hold_frac
    ego_hold_s, _ = ego_route.to_frenet(-hold_line_x, -hold_y)
    social_hold_s, _ = social_route.to_frenet(hold_line_x, hold_y)

    return CorridorMap(
        lane_width=lane_width,
        corridor_free_width=corridor_free_width,
        corridor_length=corridor_length,
        vehicle_length=vehicle_length,
        vehicle_width=vehicle_width,
        corridor_x=(-half_corridor, half_corridor),
        corridor_entry_s=entry_s,
        corridor_exit_s=exit_s,
        social_entry_s=s_entry_s,
        social_exit_s=s_exit_s,
        ego_target_s=exit_s + ego_target_margin,
        social_target_s=s_exit_s + social_target_margin,
        hold_line_x=hold_line_x,
        ego_hold_s=ego_hold_s,
        social_hold_s=social_hold_s,
        centerline=np.array([(-road_half_length, 0.0), (road_half_length, 0.0)]),
        ego_route=ego_route,
        social_route=social_route,
        static_obstacles=statics,
    )


@dataclass
class EpisodeConfig:
    rng_seed: int = 0
    social_style: str = "conservative"
    social_start_dist: Optional[float] = None
    ego_start_dist: float = 13.35
    initial_speed: float = 0.0
    step_dt: float = 0.2
    time_limit_s: float = 40.0
    conservative_range: tuple = (11.99, 14.02)
    aggressive_range: tuple = (16.33, 18.80)


@dataclass
class VehicleState:
    frenet: FrenetState
    x: float
    y: float
    heading: float
    speed: float
    target_s: float
    start_s: float
    arrived: bool = False

    def corners(self, length: float, width: float) -> np.ndarray:
        return box_corners(self.x, self.y, self.heading, length, width)


@dataclass
class WorldState:
    map: CorridorMap
    config: EpisodeConfig
    step_index: int
    t: float
    ego: VehicleState
    social: VehicleState
    outcome: str
    social_start_dist: float
    max_steps: int
    social_history: list = field(default_factory=list)


@dataclass
class StepOutcome:
    reward: float
    outcome: str
    done: bool
    collided: bool


def compute_reward(outcome: str) -> float:
    """Sparse shaping: a flat time penalty, a collision penalty that
    replaces it, and a joint-arrival bonus. Timeouts earn no extra term."""
    if outcome == COLLISION:
        return REWARD_COLLISION
    if outcome == BOTH_REACHED:
        return REWARD_SUCCESS
    return REWARD_STEP


def _vehicle_at(route: ReferencePath, s: float, speed: float, target_s: float) -> VehicleState:
    xy, _, _ = route.to_world([s], [0.0])
    heading = float(route.heading_at(s)[0])
    return VehicleState(
        frenet=FrenetState(s=s, s_dot=speed),
        x=float(xy[0, 0]), y=float(xy[0, 1]), heading=heading, speed=speed,
        target_s=target_s, start_s=s, arrived=s >= target_s,
    )


def reset(config: EpisodeConfig, corridor: CorridorMap) -> WorldState:
    """Place both vehicles on their routes; deterministic in the seed."""
    rng = np.random.default_rng(config.rng_seed)
    if config.social_start_dist is not None:
        social_dist = float(config.social_start_dist)
    else:
        lo, hi = {
            "conservative": config.conservative_range,
            "aggressive": config.aggressive_range,
        }[config.social_style]
        social_dist = float(rng.uniform(lo, hi))

    ego = _vehicle_at(
        corridor.ego_route,
        corridor.corridor_entry_s - config.ego_start_dist,
        config.initial_speed,
        corridor.ego_target_s,
    )
    social = _vehicle_at(
        corridor.social_route,
        corridor.social_entry_s - social_dist,
        config.initial_speed,
        corridor.social_target_s,
    )
    world = WorldState(
        map=corridor,
        config=config,
        step_index=0,
        t=0.0,
        ego=ego,
        social=social,
        outcome=RUNNING,
        social_start_dist=social_dist,
        max_steps=int(round(config.time_limit_s / config.step_dt)),
    )
    world.social_history.append(social.corners(corridor.vehicle_length, corridor.vehicle_width))
    return world


def _advance(vehicle: VehicleState, plan: CandidateTrajectory, dt: float) -> None:
    if plan.t.shape[0] < 2 or plan.t[-1] + 1e-9 < dt:
        raise RuntimeError("stale trajectory: plan does not cover one control step")
    if abs(plan.t[1] - dt) > 1e-9:
        raise RuntimeError("stale trajectory: plan sampling differs from the control step")
    vehicle.frenet = plan.state_at(1)
    vehicle.x, vehicle.y, vehicle.heading, vehicle.speed = plan.pose_at(1)
    if vehicle.frenet.s >= vehicle.target_s:
        vehicle.arrived = True


def step(
    world: WorldState,
    ego_plan: CandidateTrajectory,
    social_plan: CandidateTrajectory,
) -> tuple[WorldState, StepOutcome]:
    """Advance both vehicles one control step along their plans.

    Outcome priority: collision, then joint arrival, then timeout. The
    world is mutated in place and returned for convenience.
    """
    if world.outcome != RUNNING:
        raise RuntimeError("episode already finished")
    m = world.map
    dt = world.config.step_dt
    _advance(world.ego, ego_plan, dt)
    _advance(world.social, social_plan, dt)
    world.step_index += 1
    world.t = world.step_index * dt

    ego_c = world.ego.corners(m.vehicle_length, m.vehicle_width)
    soc_c = world.social.corners(m.vehicle_length, m.vehicle_width)
    world.social_history.append(soc_c)

    collided = boxes_overlap(ego_c, soc_c)
    if not collided:
        for sc in m.static_obstacles:
            if boxes_overlap(ego_c, sc) or boxes_overlap(soc_c, sc):
                collided = True
                break

    if collided:
        outcome = COLLISION
    elif world.ego.arrived and world.social.arrived:
        outcome = BOTH_REACHED
    elif world.step_index >= world.max_steps:
        outcome = TIMEOUT
    else:
        outcome = RUNNING

    world.outcome = outcome
    done = outcome != RUNNING
    return world, StepOutcome(
        reward=compute_reward(outcome), outcome=outcome, done=done, collided=collided
    )


def suspend_count(speeds, threshold: float = 0.1, started_at_rest: bool = False) -> int:
    """Number of standstill intervals: maximal runs of speed below the
    threshold. A run that begins at the first sample is ignored when the
    episode started at rest, so the initial pull-away is not counted."""
    speeds = np.asarray(speeds, dtype=float)
    below = speeds < threshold
    if below.size == 0:
        return 0
    starts = below & ~np.concatenate([[False], below[:-1]])
    count = int(starts.sum())
    if started_at_rest and below[0]:
        count -= 1
    return count


@dataclass
class EpisodeLog:
    """Per-step trace of one episode plus metadata for replay.

    The columns mirror what an external analysis would need; extra
    in-memory arrays (route progress, headings) support the interaction
    metrics without widening the CSV.
    """

    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    ego_s: list = field(default_factory=list)
    social_s: list = field(default_factory=list)
    ego_heading: list = field(default_factory=list)
    social_heading: list = field(default_factory=list)

    def append_step(self, world: WorldState, action_horizon_s: float, reward: float) -> None:
        self.rows.append((
            world.step_index, world.t,
            world.ego.x, world.ego.y, world.ego.speed,
            world.social.x, world.social.y, world.social.speed,
            action_horizon_s, reward, world.outcome,
        ))
        self.ego_s.append(world.ego.frenet.s)
        self.social_s.append(world.social.frenet.s)
        self.ego_heading.append(world.ego.heading)
        self.social_heading.append(world.social.heading)

    @property
    def outcome(self) -> str:
        return self.rows[-1][-1] if self.rows else RUNNING

    @property
    def total_reward(self) -> float:
        return float(sum(r[9] for r in self.rows))

    @property
    def driving_time_s(self) -> float:
        return float(self.rows[-1][1]) if self.rows else 0.0

    def ego_speeds(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows], dtype=float)

    def rewards(self) -> np.ndarray:
        return np.array([r[9] for r in self.rows], dtype=float)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [row[0]] + [_fmt(v) for v in row[1:10]] + [row[10]]
            )
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())
        # Route-distance and heading series ride along in the sidecar; the
        # CSV keeps its fixed column set.
        sidecar = dict(self.meta)
        sidecar["series"] = {
            "ego_s": self.ego_s,
            "social_s": self.social_s,
            "ego_heading": self.ego_heading,
            "social_heading": self.social_heading,
        }
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        log = cls()
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != LOG_COLUMNS:
                raise ValueError(f"unexpected log columns: {header}")
            for rec in reader:
                log.rows.append((
                    int(rec[0]), *[float(v) for v in rec[1:10]], rec[10],
                ))
        try:
            with open(str(path) + ".meta.json") as fh:
                log.meta = json.load(fh)
        except FileNotFoundError:
            pass
        series = log.meta.pop("series", None)
        if series is not None:
            log.ego_s = list(series["ego_s"])
            log.social_s = list(series["social_s"])
            log.ego_heading = list(series["ego_heading"])
            log.social_heading = list(series["social_heading"])
        return log


def _fmt(v: float) -> str:
    return "%.17g" % v
