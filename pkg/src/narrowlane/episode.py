"""Running one two-vehicle corridor episode end to end.

Each control step both vehicles replan along their own routes. The ego
vehicle's controller picks how far ahead the other vehicle is projected
(the prediction horizon); the social vehicle always projects the ego at
the horizon implied by its style. Shorter horizons ignore distant
conflict and push into the corridor, longer ones see it early and wait,
so the horizon choice is the negotiation knob.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import network as net
from .learning import RolloutSegment, log_softmax
from .occupancy import build_stack
from .planner import CostWeights, FrenetPlanner, PlannerLimits, SamplingGrids
from .world import (
    RUNNING,
    CorridorMap,
    EpisodeConfig,
    EpisodeLog,
    reset,
    step,
    suspend_count,
)

ACTION_HORIZONS_S = (0.0, 2.0, 4.0, 6.0)


@dataclass
class ControllerDecision:
    horizon_s: float
    action_index: Optional[int] = None
    log_prob: float = 0.0
    value: float = 0.0


class FixedHorizonController:
    """Always projects the other vehicle the same distance ahead."""

    needs_observation = False

    def __init__(self, horizon_s: float):
        self.horizon_s = float(horizon_s)
        self.name = f"fixed-{horizon_s:g}s"

    def choose(self, stack=None) -> ControllerDecision:
        return ControllerDecision(self.horizon_s)


class PolicyController:
    """Network-driven horizon choice from the temporal occupancy stack."""

    needs_observation = True

    def __init__(
        self,
        params: dict,
        actions_s=ACTION_HORIZONS_S,
        greedy: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        if not greedy and rng is None:
            raise ValueError("stochastic action selection needs a random generator")
        self.params = params
        self.actions_s = tuple(float(a) for a in actions_s)
        self.greedy = greedy
        self.rng = rng
        self.name = "adaptive"

    def choose(self, stack) -> ControllerDecision:
        logits, value, _ = net.forward(self.params, stack)
        logp = log_softmax(logits)
        if self.greedy:
            action = int(np.argmax(logp))
        else:
            action = int(self.rng.choice(len(self.actions_s), p=np.exp(logp)))
        return ControllerDecision(
            horizon_s=self.actions_s[action],
            action_index=action,
            log_prob=float(logp[action]),
            value=float(value),
        )


@dataclass
class PlanningProfile:
    """Planner settings shared by both vehicles."""

    limits: PlannerLimits = field(default_factory=PlannerLimits)
    weights: CostWeights = field(default_factory=CostWeights)
    grids: SamplingGrids = field(default_factory=SamplingGrids)
    reference_speed: float = 6.0
    plan_horizon_s: float = 6.0
    conservative_horizon_s: float = 6.0
    aggressive_horizon_s: float = 2.0
    goal_decel: float = 1.5
    goal_overshoot: float = 1.0
    # Safety margin the ego adds to the predicted footprint of the social
    # vehicle. The social vehicle predicts the ego at its exact size; if
    # both sides padded, close passes would deadlock into mutual stalls.
    predict_extra_length: float = 0.5
    predict_extra_width: float = 0.0
    # Bottleneck convention for the social vehicle: when the ego is closer
    # to the single-file stretch by more than hold_bias metres, the social
    # vehicle waits where it is and resumes once the ego has cleared the
    # bottleneck by release_clearance metres. Near the bias the social
    # presses on instead, so the right of way genuinely depends on the
    # sampled start, not on the setting label.
    hold_bias: float = 3.5
    release_clearance: float = 2.0


@dataclass
class GridSettings:
    size: int = 84
    resolution: float = 1.0
    spacing_steps: int = 5
    frames: int = 4


class _SegmentAccumulator:
    def __init__(self):
        self.stacks = []
        self.actions = []
        self.rewards = []
        self.values = []
        self.log_probs = []
        self.dones = []

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, stack, decision: ControllerDecision, reward: float, done: bool) -> None:
        self.stacks.append(stack)
        self.actions.append(decision.action_index)
        self.rewards.append(reward)
        self.values.append(decision.value)
        self.log_probs.append(decision.log_prob)
        self.dones.append(done)

    def seal(self, bootstrap_value: float) -> RolloutSegment:
        return RolloutSegment(
            stacks=np.stack(self.stacks).astype(np.uint8),
            actions=np.array(self.actions, dtype=np.int64),
            rewards=np.array(self.rewards, dtype=np.float64),
            values=np.array(self.values, dtype=np.float64),
            log_probs=np.array(self.log_probs, dtype=np.float64),
            dones=np.array(self.dones, dtype=bool),
            bootstrap_value=float(bootstrap_value),
        )


def _make_planner(route, goal_s, corridor: CorridorMap, profile: PlanningProfile, dt: float):
    return FrenetPlanner(
        route,
        profile.limits,
        profile.weights,
        profile.grids,
        vehicle_length=corridor.vehicle_length,
        vehicle_width=corridor.vehicle_width,
        step_dt=dt,
        horizon_steps=int(round(profile.plan_horizon_s / dt)),
        reference_speed=profile.reference_speed,
        goal_s=goal_s,
        goal_decel=profile.goal_decel,
        goal_overshoot=profile.goal_overshoot,
    )


def run_episode(
    corridor: CorridorMap,
    ep: EpisodeConfig,
    ego_controller,
    profile: Optional[PlanningProfile] = None,
    grid: Optional[GridSettings] = None,
    record_segments: bool = False,
    segment_len: int = 128,
    config_hash: Optional[str] = None,
    social_horizon_s: Optional[float] = None,
):
    """Simulate one episode; returns (EpisodeLog, list of RolloutSegment).

    Segments are only recorded for observation-driven controllers. A
    segment that fills up mid-episode is closed with the value estimate
    of the next observed state; the final one closes with zero because
    the terminal reward needs no bootstrap.
    """
    if record_segments and not ego_controller.needs_observation:
        raise ValueError("rollout segments need a controller that consumes observations")
    profile = profile or PlanningProfile()
    grid = grid or GridSettings()
    dt = ep.step_dt

    world = reset(ep, corridor)
    ego_planner = _make_planner(corridor.ego_route, corridor.ego_target_s, corridor, profile, dt)
    soc_planner = _make_planner(
        corridor.social_route, corridor.social_target_s, corridor, profile, dt
    )
    if social_horizon_s is None:
        social_horizon_s = {
            "conservative": profile.conservative_horizon_s,
            "aggressive": profile.aggressive_horizon_s,
        }[ep.social_style]
    soc_steps = int(round(social_horizon_s / dt))
    statics = corridor.static_obstacles
    pred_length = corridor.vehicle_length + profile.predict_extra_length
    pred_width = corridor.vehicle_width + profile.predict_extra_width
    holding = False
    released = False

    log = EpisodeLog(
        meta={
            "seed": ep.rng_seed,
            "social_style": ep.social_style,
            "social_start_dist": world.social_start_dist,
            "ego_start_dist": ep.ego_start_dist,
            "controller": ego_controller.name,
            "social_horizon_s": social_horizon_s,
            "time_limit_s": ep.time_limit_s,
            "step_dt": ep.step_dt,
        }
    )
    if config_hash is not None:
        log.meta["config_sha256"] = config_hash

    segments = []
    current = _SegmentAccumulator() if record_segments else None
    awaiting_bootstrap = None

    while world.outcome == RUNNING:
        stack = None
        if ego_controller.needs_observation:
            stack = build_stack(
                world.social_history,
                statics,
                world.ego.x,
                world.ego.y,
                world.ego.heading,
                grid.size,
                grid.resolution,
                grid.spacing_steps,
                grid.frames,
            )
        decision = ego_controller.choose(stack)
        if awaiting_bootstrap is not None:
            segments.append(awaiting_bootstrap.seal(decision.value))
            awaiting_bootstrap = None

        ego_steps = int(round(decision.horizon_s / dt))
        ego_pred = ego_planner.predict_other(
            corridor.social_route, world.social.x, world.social.y, world.social.speed,
            ego_steps, other_length=pred_length, other_width=pred_width,
        )
        ego_plan = ego_planner.plan(
            world.ego.frenet, statics, ego_pred, current_heading=world.ego.heading
        )
        if not released:
            if holding:
                if world.ego.x > corridor.corridor_x[1] + profile.release_clearance:
                    holding = False
                    released = True
            elif world.social.frenet.s < corridor.social_hold_s - 0.5:
                ego_dist = corridor.ego_hold_s - world.ego.frenet.s
                soc_dist = corridor.social_hold_s - world.social.frenet.s
                if soc_dist > ego_dist + profile.hold_bias:
                    holding = True
        if holding:
            soc_plan = soc_planner.emergency_stop(
                world.social.frenet, current_heading=world.social.heading
            )
        else:
            soc_pred = soc_planner.predict_other(
                corridor.ego_route, world.ego.x, world.ego.y, world.ego.speed,
                soc_steps, other_length=corridor.vehicle_length, other_width=corridor.vehicle_width,
            )
            soc_plan = soc_planner.plan(
                world.social.frenet, statics, soc_pred, current_heading=world.social.heading
            )

        world, outcome = step(world, ego_plan, soc_plan)
        log.append_step(world, decision.horizon_s, outcome.reward)

        if current is not None:
            current.add(stack, decision, outcome.reward, outcome.done)
            if outcome.done:
                segments.append(current.seal(0.0))
                current = _SegmentAccumulator()
            elif len(current) >= segment_len:
                awaiting_bootstrap = current
                current = _SegmentAccumulator()

    log.meta["social_held"] = holding or released
    log.meta["outcome"] = log.outcome
    log.meta["driving_time_s"] = log.driving_time_s
    log.meta["total_reward"] = log.total_reward
    log.meta["suspend_count"] = suspend_count(
        log.ego_speeds(), started_at_rest=ep.initial_speed <= 0.1
    )
    return log, segments
