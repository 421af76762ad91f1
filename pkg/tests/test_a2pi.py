import logging

import numpy as np
import pytest

from marollout import a2pi
from marollout.a2pi import (
    FIXED,
    SHARED,
    PolicyPool,
    SlotOverflowError,
    SweepSchedule,
    a2pi_sweep,
    assign_agents,
    collect,
    evaluate,
    run_episode,
    simultaneous_sweep,
    train,
)
from marollout.config import ScenarioConfig
from marollout.env import observation_dim
from marollout.ppo import PpoConfig

CFG = PpoConfig(epochs=2)


def small_scenario(n_avs=2):
    return ScenarioConfig(horizon=260.0, fixed_av_count=n_avs)


def make_pool(n, mode=FIXED, seed=0):
    return PolicyPool.create(n, mode, observation_dim(5), 11, seed, CFG)


# -- pool and schedule ----------------------------------------------------------------
def test_pool_shapes():
    assert len(make_pool(6).slots) == 6
    assert len(make_pool(6, SHARED).slots) == 1
    with pytest.raises(ValueError):
        PolicyPool(make_pool(2).slots, SHARED)
    with pytest.raises(ValueError):
        PolicyPool(make_pool(2).slots, "round-robin")


def test_pool_save_load(tmp_path):
    pool = make_pool(3)
    pool.iteration = 2
    pool.save(tmp_path / "p")
    back = PolicyPool.load(tmp_path / "p")
    assert back.digests() == pool.digests() and back.iteration == 2 and back.mode == FIXED
    assert sorted(p.name for p in (tmp_path / "p").iterdir()) == [
        "manifest.json", "slot_0.npz", "slot_1.npz", "slot_2.npz"]


def test_schedule_validation():
    assert SweepSchedule.ascending(3).order == (0, 1, 2)
    with pytest.raises(ValueError):
        SweepSchedule((0, 0, 1))
    with pytest.raises(ValueError):
        SweepSchedule((0,), sweeps=-1)


# -- assignment -------------------------------------------------------------------------
def test_shared_pool_maps_everyone_to_one_slot():
    mapping = assign_agents(make_pool(1, SHARED), list(range(100, 117)), {})
    assert len(mapping) == 17 and set(mapping.values()) == {0}


def test_fixed_pool_ordinal_assignment():
    mapping = assign_agents(make_pool(6), [11, 12, 13, 14, 15, 16], {})
    assert mapping == {11: 0, 12: 1, 13: 2, 14: 3, 15: 4, 16: 5}


def test_fixed_pool_overflow():
    pool = make_pool(2)
    mapping = assign_agents(pool, [1, 2], {})
    with pytest.raises(SlotOverflowError, match="shared"):
        assign_agents(pool, [3], mapping)


def test_fixed_pool_reuses_released_slot():
    pool = make_pool(3)
    mapping = assign_agents(pool, [1, 2, 3], {})
    del mapping[2]
    assert assign_agents(pool, [4], mapping)[4] == 1


# -- episodes ----------------------------------------------------------------------------
def test_uncontrolled_episode_matches_plain_simulation():
    scen = small_scenario()
    res = run_episode(scen.make_env(), None, 5, np.random.default_rng(0))
    sim = scen.make_sim(5)
    sim.run(scen.steps)
    assert res.avg_tt == sim.travel_time_stats().avg_tt and res.trajectories == {}
    assert res.steps == scen.steps


def test_learner_trajectories_are_consistent():
    scen = small_scenario()
    res = run_episode(scen.make_env(), make_pool(2), 5, np.random.default_rng(0), learners=[0, 1])
    trajs = res.trajectories[0] + res.trajectories[1]
    assert trajs
    for t in trajs:
        t.check()
        assert all(lp <= 0 for lp in t.log_probs)
        assert len(t) > 0


def test_collect_discards_failed_episodes(monkeypatch, caplog):
    scen = small_scenario()
    real = a2pi.run_episode
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise FloatingPointError("simulated blow-up")
        return real(*args, **kwargs)

    monkeypatch.setattr(a2pi, "run_episode", flaky)
    with caplog.at_level(logging.WARNING):
        batches, rewards = collect(scen.make_env(), make_pool(2), [0], 3, 0, 1, 0)
    assert len(rewards) == 2 and "discarding episode 0" in caplog.text


# -- sweeps -------------------------------------------------------------------------------
def test_freeze_and_staging(monkeypatch):
    scen = small_scenario()
    env = scen.make_env()
    pool = make_pool(2)
    start = pool.digests()
    seen = {}
    real_collect = a2pi.collect

    def spy(env_, pool_, learners, n, seed, sweep, agent):
        seen[(sweep, agent)] = pool_.digests()
        return real_collect(env_, pool_, learners, n, seed, sweep, agent)

    monkeypatch.setattr(a2pi, "collect", spy)
    after_agent = {}
    a2pi_sweep(pool, env, CFG, SweepSchedule.ascending(2, 1, 1), 0,
               on_agent=lambda k, i, p, rec: after_agent.__setitem__(i, p.digests()))
    end = pool.digests()
    # slot 1 frozen while slot 0 learns, slot 0 frozen while slot 1 learns
    assert after_agent[0][1] == start[1] and after_agent[0][0] != start[0]
    assert after_agent[1][0] == after_agent[0][0] and end[1] != start[1]
    # slot 1 collects against slot 0's new policy from this sweep
    assert seen[(1, 0)] == start
    assert seen[(1, 1)][0] == end[0] != start[0]
    assert seen[(1, 1)][1] == start[1]
    assert pool.iteration == 1 and [h["agent"] for h in pool.history] == [0, 1]


def test_simultaneous_sweep_updates_from_joint_data(monkeypatch):
    scen = small_scenario()
    pool = make_pool(2)
    start = pool.digests()
    calls = []
    real_collect = a2pi.collect

    def spy(env_, pool_, learners, *args):
        calls.append((list(learners), pool_.digests()))
        return real_collect(env_, pool_, learners, *args)

    monkeypatch.setattr(a2pi, "collect", spy)
    simultaneous_sweep(pool, scen.make_env(), CFG, SweepSchedule.ascending(2, 1, 1), 0)
    assert calls == [([0, 1], start)]
    assert all(a != b for a, b in zip(pool.digests(), start))


def test_single_slot_simultaneous_equals_marollout():
    scen = small_scenario()
    pool_a, pool_b = make_pool(1, SHARED), make_pool(1, SHARED)
    sched = SweepSchedule.ascending(1, 1, 2)
    a2pi_sweep(pool_a, scen.make_env(), CFG, sched, 3)
    simultaneous_sweep(pool_b, scen.make_env(), CFG, sched, 3)
    assert pool_a.digests() == pool_b.digests()


# -- training loop --------------------------------------------------------------------------
def test_train_zero_sweeps_only_evaluates():
    scen = small_scenario()
    pool = make_pool(2)
    before = pool.digests()
    pool, curve = train(scen.make_env(), pool, CFG, SweepSchedule.ascending(2, 0, 1), 0, [1, 2])
    assert pool.digests() == before and len(curve) == 1 and curve[0]["sweep"] == 0
    ev = evaluate(scen.make_env(), pool, [1, 2])
    assert curve[0]["eval_reward"] == ev.median_reward and curve[0]["eval_avg_tt"] == ev.median_tt


def test_train_is_deterministic_and_checkpoints(tmp_path):
    scen = small_scenario()

    def run(ckpt):
        pool = make_pool(2)
        _, curve = train(scen.make_env(), pool, CFG, SweepSchedule.ascending(2, 2, 1), 4, [1],
                         checkpoint_dir=ckpt)
        return pool, curve

    pool_a, curve_a = run(tmp_path / "a")
    pool_b, curve_b = run(None)
    assert curve_a == curve_b and pool_a.digests() == pool_b.digests()
    assert [(r["sweep"], r["agent"]) for r in curve_a] == [(0, ""), (1, 0), (1, 1), (2, 0), (2, 1)]
    assert PolicyPool.load(tmp_path / "a" / "sweep_2").digests() == pool_a.digests()
    assert (tmp_path / "a" / "sweep_1" / "manifest.json").exists()


def test_divergence_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    scen = small_scenario()
    real_update = a2pi.ppo_update
    n = []

    def update(slot, batch, cfg, rng):
        n.append(1)
        if len(n) > 2:
            raise FloatingPointError("non-finite PPO loss")
        return real_update(slot, batch, cfg, rng)

    monkeypatch.setattr(a2pi, "ppo_update", update)
    pool = make_pool(2)
    with pytest.raises(FloatingPointError):
        train(scen.make_env(), pool, CFG, SweepSchedule.ascending(2, 3, 1), 0, [1],
              checkpoint_dir=tmp_path)
    assert (tmp_path / "sweep_1").exists() and not (tmp_path / "sweep_2").exists()
    assert PolicyPool.load(tmp_path / "sweep_1").iteration == 1
