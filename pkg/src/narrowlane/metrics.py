"""Evaluation protocol: push and yield settings, baselines, and the
who-goes-first index.

The index compares how far each vehicle has traveled along its own route
since the social vehicle first appeared inside the ego's occupancy window,
scaled by the fixed ratio of the two starting distances to the bottleneck.
Positive values mean the social vehicle is pulling ahead (the ego yields),
negative values mean the ego is. The denominator is strictly positive, so
the sign always matches the raw travel gap; the scaling only keeps traces
from different start geometries comparable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .episode import (
    ACTION_HORIZONS_S,
    FixedHorizonController,
    PolicyController,
    run_episode as _simulate,
)
from .world import BOTH_REACHED, COLLISION, TIMEOUT, EpisodeConfig, build_map

NEGATIVE_THROUGHOUT = "negative_throughout"
POSITIVE_THEN_NEGATIVE = "positive_then_negative"
OTHER = "other"

REPORT_COLUMNS = (
    "controller",
    "setting",
    "n",
    "mean_drive_time_s",
    "sd_drive_time_s",
    "mean_suspends",
    "sd_suspends",
    "mean_reward",
    "sd_reward",
    "success_rate",
    "collision_rate",
    "timeout_rate",
)


@dataclass(frozen=True)
class ExperimentSetting:
    """One evaluation scenario: where the social vehicle starts and how it
    plans. seeds defaults to range(episodes)."""

    name: str
    social_start_range: tuple
    social_style: str = "aggressive"
    episodes: int = 100
    seeds: tuple = ()

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("a setting needs at least one episode")
        if not self.seeds:
            object.__setattr__(self, "seeds", tuple(range(self.episodes)))
        elif len(self.seeds) != self.episodes:
            raise ValueError("seeds, when given, must match the episode count")


def push_setting(episodes: int = 100) -> ExperimentSetting:
    """Social vehicle starts farther from the bottleneck than the ego."""
    return ExperimentSetting("push", (16.33, 18.80), "aggressive", episodes)


def yield_setting(episodes: int = 100) -> ExperimentSetting:
    """Social vehicle starts closer to the bottleneck than the ego."""
    return ExperimentSetting("yield", (11.99, 14.02), "aggressive", episodes)


def run_episode(controller, setting: ExperimentSetting, seed: int,
                corridor=None, profile=None, grid=None):
    """One closed-loop episode under the setting; returns its log."""
    corridor = corridor if corridor is not None else build_map()
    range_key = (
        "conservative_range" if setting.social_style == "conservative" else "aggressive_range"
    )
    ep = EpisodeConfig(
        rng_seed=seed,
        social_style=setting.social_style,
        **{range_key: tuple(setting.social_start_range)},
    )
    log, _ = _simulate(corridor, ep, controller, profile=profile, grid=grid)
    return log


# -- behavior index -------------------------------------------------------------


@dataclass
class BehaviorIndexSeries:
    """Per-step index from the perception start onward."""

    psi: np.ndarray
    start_step: int
    d_ini_ego: float
    d_ini_soc: float

    def at(self, step: int) -> float:
        if step < self.start_step:
            raise ValueError(
                f"behavior index is undefined before step {self.start_step}, "
                "when the social vehicle enters the ego's perception window"
            )
        return float(self.psi[step - self.start_step])

    def __len__(self) -> int:
        return int(self.psi.shape[0])


def behavior_index(log, window_half_m: float = 42.0) -> BehaviorIndexSeries:
    """Who-goes-first index over one episode log.

    The series starts at the first step whose occupancy window contains
    the social vehicle's center: positions are taken to the ego frame at
    each step, matching how the grids are rendered. Travel distances are
    route arc lengths measured from that step.
    """
    if not log.ego_s or len(log.ego_s) != len(log.rows):
        raise ValueError("log carries no route-distance series")
    try:
        d_ego = float(log.meta["ego_start_dist"])
        d_soc = float(log.meta["social_start_dist"])
    except KeyError as err:
        raise ValueError("log metadata lacks the initial distances") from err
    rows = log.rows
    start_step = None
    for k, row in enumerate(rows):
        dx = row[5] - row[2]
        dy = row[6] - row[3]
        heading = log.ego_heading[k]
        c, s = math.cos(heading), math.sin(heading)
        local_x = dx * c + dy * s
        local_y = -dx * s + dy * c
        if max(abs(local_x), abs(local_y)) <= window_half_m:
            start_step = k
            break
    if start_step is None:
        raise ValueError("social vehicle never entered the ego's perception window")

    ego = np.asarray(log.ego_s[start_step:], dtype=float)
    soc = np.asarray(log.social_s[start_step:], dtype=float)
    gap = (soc - soc[0]) - (ego - ego[0])
    psi = np.arctan(gap / (d_ego / d_soc))
    return BehaviorIndexSeries(psi, start_step, d_ego, d_soc)


def sign_pattern(series, dead_band: float = 0.05) -> str:
    """Classify an index trace by its sign history.

    Samples within the dead band count as zero and are skipped. The trace
    is negative_throughout when every remaining sample is negative (and
    there is at least one), positive_then_negative when the remaining
    samples form a positive run followed by a negative run, and other in
    every other case.
    """
    psi = series.psi if isinstance(series, BehaviorIndexSeries) else np.asarray(series, dtype=float)
    signs = np.sign(psi)
    signs[np.abs(psi) <= dead_band] = 0.0
    nz = signs[signs != 0.0]
    if nz.size == 0:
        return OTHER
    if (nz < 0).all():
        return NEGATIVE_THROUGHOUT
    runs = nz[np.r_[True, nz[1:] != nz[:-1]]]
    if runs.tolist() == [1.0, -1.0]:
        return POSITIVE_THEN_NEGATIVE
    return OTHER


# -- aggregation ----------------------------------------------------------------


@dataclass(frozen=True)
class SettingSummary:
    n: int
    mean_drive_time_s: float
    sd_drive_time_s: float
    min_drive_time_s: float
    max_drive_time_s: float
    mean_suspends: float
    sd_suspends: float
    min_suspends: float
    max_suspends: float
    mean_reward: float
    sd_reward: float
    min_reward: float
    max_reward: float
    success_rate: float
    collision_rate: float
    timeout_rate: float


def _stats(values) -> tuple:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std()), float(arr.min()), float(arr.max())


def drive_time_s(log) -> float:
    """Seconds to joint arrival; failures are booked at the time limit."""
    if log.outcome == BOTH_REACHED:
        return float(log.driving_time_s)
    return float(log.meta["time_limit_s"])


def aggregate(logs) -> SettingSummary:
    """Fold episode logs into one summary; order does not matter."""
    if not logs:
        raise ValueError("nothing to aggregate")
    times = [drive_time_s(log) for log in logs]
    suspends = [float(log.meta["suspend_count"]) for log in logs]
    rewards = [log.total_reward for log in logs]
    outcomes = [log.outcome for log in logs]
    n = len(logs)
    return SettingSummary(
        n,
        *_stats(times),
        *_stats(suspends),
        *_stats(rewards),
        outcomes.count(BOTH_REACHED) / n,
        outcomes.count(COLLISION) / n,
        outcomes.count(TIMEOUT) / n,
    )


# -- the full protocol ----------------------------------------------------------


def standard_controllers(params: Optional[dict] = None) -> list:
    """The adaptive policy (when weights are given) plus every fixed
    baseline from the action set."""
    controllers = []
    if params is not None:
        controllers.append(PolicyController(params, greedy=True))
    controllers.extend(FixedHorizonController(h) for h in ACTION_HORIZONS_S)
    return controllers


@dataclass
class EvaluationResult:
    rows: list
    logs: dict

    def summary(self, controller: str, setting: str) -> SettingSummary:
        for name, setting_name, summary in self.rows:
            if name == controller and setting_name == setting:
                return summary
        raise KeyError(f"no summary for {controller!r} in {setting!r}")


def run_evaluation(controllers, settings, corridor=None, profile=None, grid=None,
                   progress=None) -> EvaluationResult:
    """Every controller against every setting, aggregated in seed order."""
    corridor = corridor if corridor is not None else build_map()
    rows = []
    logs = {}
    for setting in settings:
        for controller in controllers:
            episode_logs = [
                run_episode(controller, setting, seed,
                            corridor=corridor, profile=profile, grid=grid)
                for seed in setting.seeds
            ]
            summary = aggregate(episode_logs)
            rows.append((controller.name, setting.name, summary))
            logs[(controller.name, setting.name)] = episode_logs
            if progress is not None:
                progress(controller.name, setting.name, summary)
    return EvaluationResult(rows, logs)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def export_report(result: EvaluationResult, out_dir, window_half_m: float = 42.0):
    """Write the summary table and one index-trace CSV per episode.

    Returns (report_path, psi_dir). Trace files are named
    controller_setting_seed.csv and list step, t, psi.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for controller, setting, summary in result.rows:
            writer.writerow(
                [controller, setting, summary.n]
                + [
                    _fmt(getattr(summary, col))
                    for col in REPORT_COLUMNS[3:]
                ]
            )

    psi_dir = out / "psi"
    psi_dir.mkdir(exist_ok=True)
    for (controller, setting), episode_logs in result.logs.items():
        for log in episode_logs:
            series = behavior_index(log, window_half_m=window_half_m)
            seed = log.meta["seed"]
            path = psi_dir / f"{controller}_{setting}_{seed:04d}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(("step", "t", "psi"))
                for offset, value in enumerate(series.psi):
                    row = log.rows[series.start_step + offset]
                    writer.writerow((row[0], _fmt(row[1]), _fmt(float(value))))
    return report_path, psi_dir
