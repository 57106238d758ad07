import numpy as np
import pytest

from narrowlane import network as net
from narrowlane.episode import (
    ACTION_HORIZONS_S,
    FixedHorizonController,
    PlanningProfile,
    PolicyController,
    run_episode,
)
from narrowlane.world import LOG_COLUMNS, EpisodeConfig, build_map


@pytest.fixture(scope="module")
def corridor():
    return build_map()


PUSH = dict(social_style="aggressive", aggressive_range=(16.33, 18.80))
YIELD = dict(social_style="aggressive", aggressive_range=(11.99, 14.02))


@pytest.fixture(scope="module")
def yield_blind(corridor):
    ep = EpisodeConfig(rng_seed=0, **YIELD)
    log, segs = run_episode(corridor, ep, FixedHorizonController(0.0))
    return log, segs


@pytest.fixture(scope="module")
def yield_cautious(corridor):
    ep = EpisodeConfig(rng_seed=0, **YIELD)
    log, segs = run_episode(corridor, ep, FixedHorizonController(6.0))
    return log, segs


# -- controllers -------------------------------------------------------------


def test_fixed_controller_decision():
    ctrl = FixedHorizonController(2.0)
    assert not ctrl.needs_observation
    assert ctrl.name == "fixed-2s"
    d = ctrl.choose()
    assert d.horizon_s == 2.0
    assert d.action_index is None


def test_policy_controller_requires_rng_when_stochastic():
    params = net.init_params(0)
    with pytest.raises(ValueError, match="random generator"):
        PolicyController(params, greedy=False)


def test_policy_controller_decision_fields():
    params = net.init_params(0)
    ctrl = PolicyController(params)
    stack = np.zeros((4, 84, 84), dtype=np.uint8)
    d = ctrl.choose(stack)
    assert d.horizon_s == ACTION_HORIZONS_S[d.action_index]
    assert d.log_prob <= 0.0
    assert np.isfinite(d.value)


# -- episode outcomes --------------------------------------------------------


def test_blind_yield_episode_collides(yield_blind):
    log, _ = yield_blind
    assert log.outcome == "collision"
    assert log.rows[-1][9] == -5.0


def test_cautious_yield_episode_succeeds(yield_cautious):
    log, _ = yield_cautious
    assert log.outcome == "both_reached"
    assert log.rows[-1][9] == 10.0


def test_rewards_take_only_the_three_values(yield_blind, yield_cautious):
    for log, _ in (yield_blind, yield_cautious):
        assert set(log.rewards().tolist()) <= {-0.25, -5.0, 10.0}
        # Terminal rewards replace the per-step penalty, never stack on it.
        assert np.all(log.rewards()[:-1] == -0.25)


def test_return_stays_in_episode_bound(yield_blind, yield_cautious):
    for log, _ in (yield_blind, yield_cautious):
        steps = len(log.rows)
        assert -0.25 * (steps - 1) - 5.0 <= log.total_reward <= 10.0


def test_episode_is_deterministic(corridor):
    ep = EpisodeConfig(rng_seed=7, **PUSH)
    a, _ = run_episode(corridor, ep, FixedHorizonController(2.0))
    b, _ = run_episode(corridor, ep, FixedHorizonController(2.0))
    assert a.rows == b.rows


def test_meta_records_the_run(yield_cautious):
    log, _ = yield_cautious
    for key in (
        "seed", "social_style", "social_start_dist", "controller",
        "social_horizon_s", "outcome", "driving_time_s", "total_reward",
        "suspend_count", "social_held",
    ):
        assert key in log.meta
    assert log.meta["controller"] == "fixed-6s"
    assert log.meta["outcome"] == "both_reached"
    assert 11.99 <= log.meta["social_start_dist"] <= 14.02


def test_config_hash_lands_in_meta(corridor):
    ep = EpisodeConfig(rng_seed=1, **YIELD)
    log, _ = run_episode(
        corridor, ep, FixedHorizonController(0.0), config_hash="abc123"
    )
    assert log.meta["config_sha256"] == "abc123"


def test_social_holds_in_push_not_in_yield(corridor, yield_cautious):
    ep = EpisodeConfig(rng_seed=0, **PUSH)
    push_log, _ = run_episode(corridor, ep, FixedHorizonController(2.0))
    assert push_log.meta["social_held"]
    assert not yield_cautious[0].meta["social_held"]


def test_social_horizon_override_changes_behavior(corridor):
    ep = EpisodeConfig(rng_seed=0, **YIELD)
    default, _ = run_episode(corridor, ep, FixedHorizonController(6.0))
    both_long, _ = run_episode(
        corridor, ep, FixedHorizonController(6.0), social_horizon_s=6.0
    )
    assert both_long.meta["social_horizon_s"] == 6.0
    assert default.meta["social_horizon_s"] == 2.0
    assert default.rows != both_long.rows


def test_log_columns_match_rows(yield_blind):
    log, _ = yield_blind
    assert all(len(r) == len(LOG_COLUMNS) for r in log.rows)
    t = [r[1] for r in log.rows]
    assert t == pytest.approx(np.arange(1, len(t) + 1) * 0.2)


# -- rollout segments --------------------------------------------------------


def test_segments_need_an_observing_controller(corridor):
    ep = EpisodeConfig(rng_seed=0, **YIELD)
    with pytest.raises(ValueError, match="observations"):
        run_episode(
            corridor, ep, FixedHorizonController(0.0), record_segments=True
        )


@pytest.fixture(scope="module")
def policy_rollout(corridor):
    params = net.init_params(3, dtype=np.float32)
    ctrl = PolicyController(
        params, greedy=False, rng=np.random.default_rng(11)
    )
    ep = EpisodeConfig(rng_seed=2, **YIELD)
    return run_episode(
        corridor, ep, ctrl, record_segments=True, segment_len=16
    )


def test_segment_lengths_cover_the_episode(policy_rollout):
    log, segs = policy_rollout
    assert sum(len(s.actions) for s in segs) == len(log.rows)
    assert all(len(s.actions) <= 16 for s in segs)


def test_segment_contents_line_up_with_the_log(policy_rollout):
    log, segs = policy_rollout
    rewards = np.concatenate([s.rewards for s in segs])
    assert rewards == pytest.approx(log.rewards())
    dones = np.concatenate([s.dones for s in segs])
    assert dones.sum() == 1 and dones[-1]
    for s in segs:
        assert s.stacks.dtype == np.uint8
        assert s.stacks.shape[1:] == (4, 84, 84)
        assert np.all((s.actions >= 0) & (s.actions < len(ACTION_HORIZONS_S)))


def test_interior_segments_bootstrap_on_the_next_value(policy_rollout):
    _, segs = policy_rollout
    # Every segment cut mid-episode carries the critic's estimate of the
    # following state; the terminal segment needs none.
    assert segs[-1].bootstrap_value == 0.0
    for s in segs[:-1]:
        assert not s.dones.any()


def test_stochastic_policy_is_reproducible(corridor):
    params = net.init_params(3, dtype=np.float32)
    ep = EpisodeConfig(rng_seed=2, **YIELD)
    runs = []
    for _ in range(2):
        ctrl = PolicyController(
            params, greedy=False, rng=np.random.default_rng(5)
        )
        log, _ = run_episode(corridor, ep, ctrl)
        runs.append(log.rows)
    assert runs[0] == runs[1]


# -- profile knobs -----------------------------------------------------------


def test_profile_default_horizon_mapping():
    p = PlanningProfile()
    assert p.conservative_horizon_s == 6.0
    assert p.aggressive_horizon_s == 2.0


def test_hold_convention_is_latched(corridor):
    # Once ego priority is decided the social vehicle stays put even as
    # the distance gap narrows, then restarts after the ego passes.
    ep = EpisodeConfig(rng_seed=0, **PUSH)
    log, _ = run_episode(corridor, ep, FixedHorizonController(2.0))
    soc_speed = np.array([r[7] for r in log.rows])
    held = np.where(soc_speed < 0.05)[0]
    assert held.size > 5
    # It moves again after the hold (the release), and the episode ends well.
    assert soc_speed[held[-1]:].max() > 1.0
    assert log.outcome == "both_reached"
