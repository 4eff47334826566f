"""Baseline double-Q agent: exploration schedule, action selection, targets."""

import numpy as np
import pytest

from highway_rpf import nets, seeding
from highway_rpf.config import settings_from_sources
from highway_rpf.dqn import DqnAgent, epsilon_schedule

from conftest import random_observation


def _settings(**kw):
    base = dict(total_steps=500, eval_interval=500, eval_episodes=2, n_vehicles=5,
                learn_start=50, target_sync_interval=100, replay_capacity=2000)
    base.update(kw)
    return settings_from_sources("desk", overrides=base)


def test_epsilon_schedule_endpoints():
    assert epsilon_schedule(0) == 1.0
    assert epsilon_schedule(1_000_000) == 0.05
    assert epsilon_schedule(500_000) == pytest.approx(0.525)
    assert epsilon_schedule(5_000_000) == 0.05
    with pytest.raises(ValueError):
        epsilon_schedule(-1)


def test_epsilon_monotone_non_increasing():
    steps = np.linspace(0, 2_000_000, 400).astype(int)
    values = [epsilon_schedule(int(s)) for s in steps]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_greedy_selection_and_tie_rule(rng):
    agent = DqnAgent(_settings(), master_seed=1)
    obs = random_observation(rng, 3)
    q = nets.forward(agent.online, obs)
    assert agent.select_action(obs, 0.0, rng) == int(np.argmax(q))
    agent.online.flat[:] = 0.0  # all-equal values
    assert agent.select_action(obs, 0.0, rng) == 0
    with pytest.raises(ValueError):
        agent.select_action(obs, 1.5, rng)


def test_full_exploration_is_uniform(rng):
    agent = DqnAgent(_settings(), master_seed=2)
    obs = random_observation(rng, 2)
    counts = np.zeros(10)
    draws = 10_000
    for _ in range(draws):
        counts[agent.select_action(obs, 1.0, rng)] += 1
    expected = draws / 10
    z = (counts - expected) / np.sqrt(expected * (1 - 0.1))
    assert np.abs(z).max() < 3.5


def test_epsilon_zero_is_pure_function_of_observation(rng):
    agent = DqnAgent(_settings(), master_seed=3)
    obs = random_observation(rng, 4)
    actions = {agent.select_action(obs, 0.0, rng) for _ in range(25)}
    assert len(actions) == 1


def test_terminal_zero_td_batch_has_zero_loss(rng):
    agent = DqnAgent(_settings(), master_seed=4)
    agent.online.flat[:] = 0.0
    agent.online.value_b[:] = -10.0
    width = agent.settings.observation_width()
    n = agent.settings.batch_size
    batch = {"obs": np.zeros((n, width)), "n_veh": np.zeros(n, dtype=np.int64),
             "action": np.arange(n, dtype=np.int64) % 10,
             "reward": np.full(n, -10.0),
             "next_obs": np.zeros((n, width)), "next_n_veh": np.zeros(n, dtype=np.int64),
             "terminal": np.ones(n, dtype=bool)}
    before = agent.online.flat.copy()
    assert agent.train_step(batch) == 0.0
    np.testing.assert_array_equal(agent.online.flat, before)


def test_two_state_fixture_matches_hand_computed_target(rng):
    # hand-evaluated Bellman backup on a single transition
    settings = _settings(batch_size=1, learning_rate=1e-3)
    agent = DqnAgent(settings, master_seed=5)
    width = settings.observation_width()
    obs = np.zeros(width)
    obs[:3] = [0.2, -0.4, 0.0]
    next_obs = np.zeros(width)
    next_obs[:3] = [-0.6, 0.8, 1.0]
    batch = {"obs": obs.reshape(1, -1), "n_veh": np.zeros(1, dtype=np.int64),
             "action": np.array([2], dtype=np.int64), "reward": np.array([0.7]),
             "next_obs": next_obs.reshape(1, -1),
             "next_n_veh": np.zeros(1, dtype=np.int64),
             "terminal": np.array([False])}

    q_next_online = nets.forward(agent.online, next_obs[:3])
    a_star = int(np.argmax(q_next_online))
    q_next_target = nets.forward(agent.target, next_obs[:3])
    y = 0.7 + settings.discount * q_next_target[a_star]
    q_sa = nets.forward(agent.online, obs[:3])[2]
    expected_loss = nets.huber_loss(y - q_sa, settings.huber_delta)[0]

    assert agent.train_step(batch) == pytest.approx(expected_loss, rel=1e-12)


def test_online_equals_target_reduces_to_vanilla_max(rng):
    agent = DqnAgent(_settings(), master_seed=6)
    agent.target.copy_from(agent.online)
    width = agent.settings.observation_width()
    next_obs = rng.uniform(-1, 1, size=width)
    q = nets.forward(agent.online, next_obs)
    # double-Q bootstrap with identical nets equals the plain max
    assert q[int(np.argmax(q))] == q.max()


def test_exploration_stream_does_not_touch_sampling_stream():
    # two agents, one exploring and one greedy, draw identical minibatches
    a = DqnAgent(_settings(), master_seed=7)
    b = DqnAgent(_settings(), master_seed=7)
    a.frozen_epsilon = None
    b.frozen_epsilon = 0.0
    obs = np.zeros(3)
    for step in range(50):
        a.act_training(obs, step)
        b.act_training(obs, step)
    assert seeding.generator_state(a._sample_rng) == seeding.generator_state(b._sample_rng)


def test_target_sync_interval(rng):
    from highway_rpf.replay import Experience
    settings = _settings(target_sync_interval=4, learn_start=1, batch_size=4)
    agent = DqnAgent(settings, master_seed=8)
    width = settings.observation_width()
    snapshot = agent.target.flat.copy()
    for i in range(1, 9):
        obs = rng.uniform(-1, 1, size=width)
        agent.record(Experience(obs, 1, 0.5, obs, False))
        agent.train_tick()
        if i % 4 == 0:
            np.testing.assert_array_equal(agent.target.flat, agent.online.flat)
            snapshot = agent.target.flat.copy()
        else:
            np.testing.assert_array_equal(agent.target.flat, snapshot)
