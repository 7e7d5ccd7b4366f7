import itertools

import numpy as np
import pytest

from consensus_marl.core.envs import (
    DOWN,
    LEFT,
    RIGHT,
    STAY,
    UP,
    GridWorldConfig,
    GridWorldEnvironment,
    MdpEnvironment,
    SmallMdpSpec,
    generate_small_mdp,
    grid_features,
    grid_step,
    terminal_check,
)
from consensus_marl.core.errors import ConfigurationError
from consensus_marl.core.mdp import JointPolicy, stationary_distribution, transition_matrix_under_policy


@pytest.fixture
def grid():
    return GridWorldConfig(4, 4, ((0, 0), (3, 3), (3, 0)))


def test_move_off_grid_stays(grid):
    positions, _ = grid_step(grid, ((0, 0), (3, 3), (3, 0)), (LEFT, DOWN, UP))
    assert positions == ((0, 0), (3, 3), (3, 0))


def test_up_decreases_y(grid):
    positions, _ = grid_step(grid, ((1, 1), (2, 2), (1, 2)), (UP, RIGHT, STAY))
    assert positions == ((1, 0), (3, 2), (1, 2))


def test_reward_is_negative_distance():
    config = GridWorldConfig(6, 6, ((5, 5),))
    _, rewards = grid_step(config, ((0, 0),), (STAY,))
    assert rewards[0] == -10.0


def test_collision_at_desired_cell(grid):
    _, rewards = grid_step(grid, ((0, 0), (0, 1), (3, 0)), (STAY, UP, STAY))
    assert rewards[0] == -1.0
    assert rewards[1] == -(3 + 3) - 1
    assert rewards[2] == 0.0


def test_swapping_agents_do_not_collide():
    config = GridWorldConfig(2, 1, ((1, 0), (0, 0)))
    positions, rewards = grid_step(config, ((0, 0), (1, 0)), (RIGHT, LEFT))
    assert positions == ((1, 0), (0, 0))
    np.testing.assert_array_equal(rewards, [0.0, 0.0])


def test_exhaustive_small_grid_properties():
    config = GridWorldConfig(3, 3, ((0, 0), (2, 1)))
    cells = [(x, y) for x in range(3) for y in range(3)]
    lower = -(config.width - 1) - (config.height - 1) - (config.num_agents - 1)
    for positions in itertools.product(cells, repeat=2):
        for actions in itertools.product(range(5), repeat=2):
            new_positions, rewards = grid_step(config, positions, actions)
            assert all(config.inside(p) for p in new_positions)
            assert np.all(rewards <= 0.0) and np.all(rewards >= lower)
            # permuting agents (and their desired cells) permutes the outcome
            swapped = GridWorldConfig(3, 3, config.desired[::-1])
            swapped_positions, swapped_rewards = grid_step(swapped, positions[::-1], actions[::-1])
            assert swapped_positions[::-1] == new_positions
            np.testing.assert_array_equal(swapped_rewards[::-1], rewards)


def test_terminal_without_collisions_has_zero_reward(grid):
    positions, rewards = grid_step(grid, grid.desired, (STAY, STAY, STAY))
    assert terminal_check(grid, positions)
    np.testing.assert_array_equal(rewards, 0.0)
    assert not terminal_check(grid, ((0, 1), (3, 3), (3, 0)))


def test_grid_features():
    config = GridWorldConfig(6, 6, ((5, 5), (0, 0)))
    np.testing.assert_array_equal(grid_features(config, ((0, 0), (0, 0))), np.zeros(4))
    np.testing.assert_array_equal(grid_features(config, ((5, 5), (0, 5))), [1.0, 1.0, 0.0, 1.0])


def test_grid_features_injective():
    config = GridWorldConfig(3, 3, ((0, 0), (1, 1)))
    cells = [(x, y) for x in range(3) for y in range(3)]
    encoded = {tuple(grid_features(config, p)) for p in itertools.product(cells, repeat=2)}
    assert len(encoded) == 81


def test_grid_config_validation():
    with pytest.raises(ConfigurationError):
        GridWorldConfig(4, 4, ())
    with pytest.raises(ConfigurationError):
        GridWorldConfig(4, 4, ((4, 0),))


def test_grid_environment_reset_is_seeded(grid):
    env = GridWorldEnvironment(grid, 0.9)
    first = env.reset(np.random.default_rng(3))
    assert first == env.reset(np.random.default_rng(3))
    assert all(grid.inside(p) for p in first)
    assert env.action_sizes == (5, 5, 5)
    _, _, terminal = env.step(grid.desired, (STAY, STAY, STAY))
    assert terminal


def test_generate_small_mdp_is_deterministic():
    spec = SmallMdpSpec(4, (2, 2, 2), reward_range=(0.0, 5.0), seed=3)
    first, second = generate_small_mdp(spec), generate_small_mdp(spec)
    np.testing.assert_array_equal(first.transitions, second.transitions)
    np.testing.assert_array_equal(first.rewards, second.rewards)
    assert first.rewards.min() >= 0.0 and first.rewards.max() <= 5.0
    np.testing.assert_allclose(first.transitions.sum(axis=2), 1.0, atol=1e-12)
    stationary_distribution(transition_matrix_under_policy(first, JointPolicy.uniform(4, (2, 2, 2))))


def test_single_action_two_state_chain():
    mdp = generate_small_mdp(SmallMdpSpec(2, (1, 1), seed=5))
    P = mdp.transitions[:, 0, :]
    d = stationary_distribution(transition_matrix_under_policy(mdp, JointPolicy.uniform(2, (1, 1))))
    # two-state chain: d_0 = P(1->0) / (P(0->1) + P(1->0))
    expected = P[1, 0] / (P[0, 1] + P[1, 0])
    np.testing.assert_allclose(d, [expected, 1.0 - expected], atol=1e-12)


def test_small_mdp_adversary_tag():
    mdp = generate_small_mdp(SmallMdpSpec(3, (2, 2), seed=1, adversary=1))
    assert mdp.adversary == 1


def test_mdp_environment_wraps_sampling(small_mdp):
    env = MdpEnvironment(small_mdp)
    assert env.tabular
    s_next, rewards, terminal = env.step(0, (1, 0, 1), np.random.default_rng(0))
    assert 0 <= s_next < 4 and rewards.shape == (3,) and not terminal
    np.testing.assert_array_equal(env.encode(2), [0.0, 0.0, 1.0, 0.0])
