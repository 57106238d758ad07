"""Staged training loop for the horizon-selection policy.

Training walks through a short list of phases. Each phase fixes the start
ranges the social vehicle is sampled from, and early phases keep the two
styles well apart so the consequences of a horizon choice show up quickly:
a far-away conservative vehicle leaves the ego room to commit, a nearby
aggressive one punishes long-horizon hesitation immediately. The final
phase matches the evaluation ranges exactly.

One iteration samples a handful of tasks, rolls out episodes round-robin
over them with stochastic actions, then sweeps the collected transitions
once in shuffled disjoint minibatches. Everything is seeded per iteration,
so a run can be resumed from any checkpoint and reproduce the remainder
bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import network as net
from .episode import GridSettings, PlanningProfile, PolicyController, run_episode
from .learning import (
    AdamState,
    apply_update,
    iterate_minibatches,
    losses,
    merge_segments,
)
from .world import COLLISION, TIMEOUT, EpisodeConfig, build_map

LOG_HEADER = (
    "iteration",
    "phase",
    "mean_return",
    "policy_loss",
    "value_loss",
    "entropy",
    "collision_rate",
    "timeout_rate",
    "wall_time_s",
)


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the last good checkpoint survives."""


@dataclass(frozen=True)
class CurriculumPhase:
    conservative_range: tuple
    aggressive_range: tuple
    iterations: int
    style_mix: float = 0.5

    def __post_init__(self):
        for lo, hi in (self.conservative_range, self.aggressive_range):
            if not 0.0 < lo <= hi:
                raise ValueError(f"bad start range [{lo}, {hi}]")
        if not 0.0 <= self.style_mix <= 1.0:
            raise ValueError(f"style_mix must be a probability, got {self.style_mix}")
        if self.iterations < 1:
            raise ValueError("a phase needs at least one iteration")


@dataclass(frozen=True)
class TaskSpec:
    social_style: str
    social_start_dist: float
    seed: int


def default_curriculum(iterations=(150, 150, 200)) -> list:
    """Three phases: separated styles, an intermediate blend, then the
    evaluation ranges themselves."""
    k1, k2, k3 = iterations
    return [
        CurriculumPhase((20.0, 24.0), (10.0, 12.0), k1),
        CurriculumPhase((16.0, 19.0), (13.2, 15.4), k2),
        CurriculumPhase((11.99, 14.02), (16.33, 18.80), k3),
    ]


def sample_tasks(phase: CurriculumPhase, m: int, rng: np.random.Generator) -> list:
    """Draw m tasks: style by the phase's mix, distance uniform in the
    style's range, one fresh episode seed per task."""
    if m < 1:
        raise ValueError("need at least one task")
    tasks = []
    for _ in range(m):
        aggressive = rng.random() < phase.style_mix
        lo, hi = phase.aggressive_range if aggressive else phase.conservative_range
        dist = float(rng.uniform(lo, hi))
        assert lo <= dist <= hi
        tasks.append(
            TaskSpec(
                social_style="aggressive" if aggressive else "conservative",
                social_start_dist=dist,
                seed=int(rng.integers(0, 2**63 - 1)),
            )
        )
    return tasks


# Worker-process state for parallel rollout collection. Each worker gets the
# frozen parameter snapshot once, through the pool initializer, instead of
# once per submitted episode.
_WORKER = {}


def _init_worker(params, corridor, profile, grid, template, segment_len):
    _WORKER.update(
        params=params, corridor=corridor, profile=profile, grid=grid,
        template=template, segment_len=segment_len,
    )


def _episode_job(task: TaskSpec, action_rng):
    w = _WORKER
    return _run_task_episode(
        w["params"], task, action_rng, w["corridor"], w["profile"], w["grid"],
        w["template"], w["segment_len"],
    )


def _run_task_episode(params, task, action_rng, corridor, profile, grid, template, segment_len):
    controller = PolicyController(params, greedy=False, rng=action_rng)
    ep = replace(
        template,
        rng_seed=task.seed,
        social_style=task.social_style,
        social_start_dist=task.social_start_dist,
    )
    return run_episode(
        corridor, ep, controller, profile=profile, grid=grid,
        record_segments=True, segment_len=segment_len,
    )


def collect_rollouts(
    params: dict,
    tasks: list,
    n_episodes: int,
    rng: np.random.Generator,
    corridor=None,
    profile: Optional[PlanningProfile] = None,
    grid: Optional[GridSettings] = None,
    episode_template: Optional[EpisodeConfig] = None,
    segment_len: int = 128,
    workers: int = 1,
):
    """Run n_episodes round-robin over the tasks with stochastic actions.

    Returns (segments, logs). Each episode draws its actions from its own
    generator, spawned up front from rng, so the result is identical
    whether episodes run serially or across worker processes; parallel
    results are merged back in episode order.
    """
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    corridor = corridor or build_map()
    profile = profile or PlanningProfile()
    grid = grid or GridSettings()
    template = episode_template or EpisodeConfig()
    streams = rng.spawn(n_episodes)
    jobs = [(tasks[j % len(tasks)], streams[j]) for j in range(n_episodes)]

    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_init_worker,
            initargs=(params, corridor, profile, grid, template, segment_len),
        ) as pool:
            results = list(pool.map(_episode_job, *zip(*jobs)))
    else:
        results = [
            _run_task_episode(params, task, seq, corridor, profile, grid, template, segment_len)
            for task, seq in jobs
        ]

    segments, logs = [], []
    for log, segs in results:
        logs.append(log)
        segments.extend(segs)
    return segments, logs


@dataclass
class TrainResult:
    final_checkpoint: Path
    log_path: Path
    iterations_run: int
    last_iteration: int


def _phase_at(phases, iteration: int):
    """Map a 1-based global iteration to (phase index, phase)."""
    done = 0
    for idx, phase in enumerate(phases):
        done += phase.iterations
        if iteration <= done:
            return idx, phase
    raise ValueError(f"iteration {iteration} beyond the schedule")


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _prune_checkpoints(ckpt_dir: Path, latest: int, keep_every: int) -> None:
    for path in ckpt_dir.glob("checkpoint_*.bin"):
        it = int(path.stem.split("_")[1])
        if it != latest and it % keep_every != 0:
            path.unlink()


def train(
    out_dir,
    phases: Optional[list] = None,
    master_seed: int = 0,
    n_tasks: int = 8,
    episodes_per_iteration: int = 200,
    minibatch_size: int = 512,
    segment_len: int = 128,
    gamma: float = 0.99,
    entropy_coeff: float = 0.01,
    value_coeff: float = 0.5,
    lr_policy: float = 1e-4,
    lr_value: float = 1e-3,
    corridor=None,
    profile: Optional[PlanningProfile] = None,
    grid: Optional[GridSettings] = None,
    episode_template: Optional[EpisodeConfig] = None,
    dtype=np.float64,
    keep_every: Optional[int] = None,
    workers: int = 1,
    resume_from=None,
    progress: Optional[Callable] = None,
) -> TrainResult:
    """Run the full curriculum and leave checkpoints plus a CSV log behind.

    Every iteration writes checkpoints/checkpoint_NNNNNN.bin (weights and
    optimizer state) and appends one log row. keep_every, when set, prunes
    checkpoints that are neither the latest nor a multiple of keep_every.
    The final weights are also copied to checkpoint_final.bin in out_dir.

    resume_from restarts after the checkpoint's iteration. Per-iteration
    seeding depends only on (master_seed, iteration), so a resumed run
    continues exactly where the original would have gone.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    phases = list(phases) if phases is not None else default_curriculum()
    corridor = corridor or build_map()
    profile = profile or PlanningProfile()
    grid = grid or GridSettings()
    template = episode_template or EpisodeConfig()
    total = sum(p.iterations for p in phases)

    if resume_from is not None:
        params, opt_state, start_iter, _, adam_t = net.load_checkpoint(resume_from, dtype=dtype)
        if opt_state is None:
            raise ValueError("cannot resume: checkpoint was saved without optimizer state")
        if start_iter > total:
            raise ValueError(
                f"checkpoint is at iteration {start_iter}, past the {total}-iteration schedule"
            )
        opt = AdamState(m=opt_state["m"], v=opt_state["v"], t=adam_t)
    else:
        params = net.init_params(master_seed, dtype=dtype)
        opt = AdamState.fresh(params)
        start_iter = 0

    log_path = out / "train_log.csv"
    fresh_log = resume_from is None or not log_path.exists()
    last_good = Path(resume_from) if resume_from is not None else None

    with open(log_path, "w" if fresh_log else "a", newline="") as log_fh:
        writer = csv.writer(log_fh)
        if fresh_log:
            writer.writerow(LOG_HEADER)
            log_fh.flush()

        for iteration in range(start_iter + 1, total + 1):
            phase_idx, phase = _phase_at(phases, iteration)
            t0 = time.perf_counter()
            root = np.random.SeedSequence([master_seed, iteration])
            rng_tasks, rng_actions, rng_shuffle = map(np.random.default_rng, root.spawn(3))

            pol_sum = val_sum = ent_sum = 0.0
            seen = 0
            try:
                tasks = sample_tasks(phase, n_tasks, rng_tasks)
                segments, logs = collect_rollouts(
                    params, tasks, episodes_per_iteration, rng_actions,
                    corridor=corridor, profile=profile, grid=grid,
                    episode_template=template, segment_len=segment_len, workers=workers,
                )
                batch = merge_segments(segments, gamma)

                for mb in iterate_minibatches(batch, minibatch_size, rng_shuffle):
                    pol, val, ent, grads = losses(params, mb, entropy_coeff, value_coeff)
                    if not (math.isfinite(pol) and math.isfinite(val)):
                        raise FloatingPointError(f"loss went non-finite ({pol}, {val})")
                    apply_update(params, grads, opt, lr_policy, lr_value)
                    pol_sum += pol * len(mb)
                    val_sum += val * len(mb)
                    ent_sum += ent * len(mb)
                    seen += len(mb)
            except FloatingPointError as err:
                raise TrainingDiverged(
                    f"iteration {iteration} diverged: {err}; last good checkpoint: "
                    f"{last_good if last_good is not None else 'none written yet'}"
                ) from err

            outcomes = [log.outcome for log in logs]
            row = (
                iteration,
                phase_idx + 1,
                float(np.mean([log.total_reward for log in logs])),
                pol_sum / seen,
                val_sum / seen,
                ent_sum / seen,
                outcomes.count(COLLISION) / len(outcomes),
                outcomes.count(TIMEOUT) / len(outcomes),
                time.perf_counter() - t0,
            )
            writer.writerow([_fmt(v) for v in row])
            log_fh.flush()

            ckpt = ckpt_dir / f"checkpoint_{iteration:06d}.bin"
            net.save_checkpoint(
                ckpt, params, {"m": opt.m, "v": opt.v},
                iteration=iteration, phase=phase_idx + 1, adam_t=opt.t,
            )
            last_good = ckpt
            if keep_every is not None:
                _prune_checkpoints(ckpt_dir, iteration, keep_every)
            if progress is not None:
                progress(iteration, total, row)

    final = out / "checkpoint_final.bin"
    net.save_checkpoint(
        final, params, {"m": opt.m, "v": opt.v},
        iteration=total, phase=len(phases), adam_t=opt.t,
    )
    return TrainResult(
        final_checkpoint=final,
        log_path=log_path,
        iterations_run=total - start_iter,
        last_iteration=total,
    )
