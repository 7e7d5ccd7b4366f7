from contextlib import ExitStack
from unittest.mock import patch

import numpy as np
import pytest

from consensus_marl.config import config_from_dict
from consensus_marl.core import algorithm
from consensus_marl.core.algorithm import (
    ConsensusActorCritic,
    RewardTransform,
    StepSizeSchedule,
    actor_update,
    build_trainer,
    critic_update,
    disagreement_norm,
    estimated_td_error,
    freeze_policy_mode,
    reward_param_update,
    sample_action,
    td_error,
    train,
)
from consensus_marl.core.approximators import LinearRewardEstimate, LinearStateValue, build_tabular_features
from consensus_marl.core.consensus import CommGraph, ConsensusSchedule, ConsensusWeights
from consensus_marl.core.errors import AssumptionViolation, ConfigurationError, DivergenceError
from consensus_marl.core.mdp import Role

SMALL_MDP = {"kind": "small_mdp", "num_states": 4, "action_sizes": [2, 2, 2],
             "reward_low": 0.0, "reward_high": 5.0, "mdp_seed": 7}


def small_config(attacked=True, **overrides):
    data = {"name": "unit", "scenario": "attacked" if attacked else "clean", "environment": SMALL_MDP,
            "gamma": 0.5, "episodes": 3, "max_steps": 50, "seed": 0}
    if attacked:
        data["attack"] = {"adversary": 1}
    data.update(overrides)
    return config_from_dict(data)


def grid_config(**overrides):
    data = {"name": "grid-unit", "scenario": "attacked",
            "environment": {"kind": "grid", "width": 3, "height": 3, "desired": [[0, 0], [2, 2], [2, 0]]},
            "gamma": 0.9, "episodes": 2, "max_steps": 15, "seed": 4,
            "approximator": {"backend": "mlp", "hidden_sizes": [8, 8]},
            "attack": {"adversary": 1}}
    data.update(overrides)
    return config_from_dict(data)


@pytest.fixture
def tabular_models():
    phi, F = build_tabular_features(2, 4)
    return LinearStateValue(phi), LinearRewardEstimate(F, (2, 2))


def test_td_error_examples(tabular_models):
    critic, reward_model = tabular_models
    v = np.array([0.5, 1.5])
    assert td_error(1.0, v, 0, 1, 0.9, critic) == pytest.approx(1.85)
    assert td_error(1.0, np.zeros(2), 0, 1, 0.9, critic) == 1.0
    lam = np.zeros(8)
    lam[0 * 4 + 3] = 0.4
    assert estimated_td_error(lam, v, 0, (1, 1), 1, 0.9, critic, reward_model) == pytest.approx(1.25)


def test_reward_and_critic_updates(tabular_models):
    critic, reward_model = tabular_models
    lam = reward_param_update(np.zeros(8), 2.0, 1, (1, 0), 0.5, reward_model)
    expected = np.zeros(8)
    expected[1 * 4 + 2] = 1.0
    np.testing.assert_array_equal(lam, expected)
    np.testing.assert_allclose(critic_update(np.array([1.0, 1.0]), 2.0, 1, 0.1, critic), [1.0, 1.2])


def test_actor_update_is_projected():
    theta = actor_update(np.array([49.0, 0.0]), 10.0, np.array([1.0, -0.5]), 0.5, 50.0)
    np.testing.assert_array_equal(theta, [50.0, -2.5])


def test_step_size_schedule_validation():
    with pytest.raises(AssumptionViolation) as info:
        StepSizeSchedule(critic_exponent=0.5, actor_exponent=0.8)
    assert info.value.assumption == 6
    with pytest.raises(AssumptionViolation):
        StepSizeSchedule(critic_exponent=0.8, actor_exponent=0.8)
    with pytest.raises(AssumptionViolation):
        StepSizeSchedule(critic_exponent=0.7, actor_exponent=1.1)
    with pytest.raises(ConfigurationError):
        StepSizeSchedule(critic_scale=-1.0)


def test_step_size_ratio_decreases():
    steps = StepSizeSchedule()
    ratios = [steps.actor(t) / steps.critic(t) for t in range(0, 10_000, 100)]
    assert all(later < earlier for earlier, later in zip(ratios, ratios[1:]))
    assert steps.frozen().actor(5) == 0.0
    assert steps.frozen().critic(5) == steps.critic(5)


def test_reward_transforms():
    assert RewardTransform()(3.0, 0, 0, 0) == 3.0
    assert RewardTransform("affine", scale=-2.0, shift=1.0)(3.0, 0, 0, 0) == -5.0
    table = np.arange(8.0).reshape(2, 2, 2)
    transform = RewardTransform("table", table=table)
    assert transform(100.0, 1, 0, 1) == 5.0
    np.testing.assert_array_equal(transform.tabulate(np.zeros((2, 2, 2))), table)
    np.testing.assert_array_equal(RewardTransform("affine", 2.0, 1.0).tabulate(np.ones(3)), [3.0, 3.0, 3.0])
    with pytest.raises(ConfigurationError):
        RewardTransform("table")
    with pytest.raises(ConfigurationError):
        RewardTransform("negate")


def test_disagreement_norm():
    assert disagreement_norm(np.ones((3, 4))) == 0.0
    assert disagreement_norm(np.array([[0.0], [2.0]])) == pytest.approx(np.sqrt(2.0))


def test_sample_action_point_mass():
    rng = np.random.default_rng(0)
    assert {sample_action(np.array([0.0, 1.0, 0.0]), rng) for _ in range(50)} == {1}


def test_train_step_matches_public_updates():
    trainer = build_trainer(small_config())
    critic, reward_model, policies = trainer.models.critic, trainer.models.reward, trainer.models.policies
    runtimes = trainer.initialize()
    before = [rt.copy() for rt in runtimes]
    actions = (1, 0, 1)
    identity = ConsensusWeights(np.eye(3), 0.5, frozenset({1}))
    outcome = trainer.train_step(runtimes, 2, actions, 0, weights=identity)
    alpha_v, alpha_theta = trainer.steps.critic(0), trainer.steps.actor(0)
    for i, (old, new) in enumerate(zip(before, runtimes)):
        r = float(outcome.rewards[i])
        expected_lam = reward_param_update(old.lam, r, 2, actions, alpha_v, reward_model)
        delta = td_error(r, old.v, 2, outcome.next_state, 0.5, critic)
        Delta = estimated_td_error(old.lam, old.v, 2, actions, outcome.next_state, 0.5, critic, reward_model)
        psi = policies[i].score(old.theta, 2, actions[i])
        np.testing.assert_allclose(new.lam, expected_lam, atol=1e-12)
        np.testing.assert_allclose(new.v, critic_update(old.v, delta, 2, alpha_v, critic), atol=1e-12)
        np.testing.assert_allclose(new.theta, actor_update(old.theta, Delta, psi, alpha_theta, 50.0), atol=1e-12)
    assert len(outcome.next_actions) == 3


def test_train_step_calls_each_update_once_per_agent():
    trainer = build_trainer(small_config())
    runtimes = trainer.initialize()
    names = ("td_error", "estimated_td_error", "reward_param_update", "critic_update", "actor_update")
    mocks = {}
    with ExitStack() as stack:
        for name in names:
            mocks[name] = stack.enter_context(patch.object(algorithm, name, wraps=getattr(algorithm, name)))
        trainer.train_step(runtimes, 0, (0, 1, 1), 0)
    for name in names:
        assert mocks[name].call_count == 3, name


def test_consensus_mixes_transmitted_parameters():
    trainer = build_trainer(small_config())
    runtimes = trainer.initialize()
    trainer.train_step(runtimes, 0, (0, 1, 0), 0)
    C = trainer.schedule.weights(0).matrix
    transmitted = np.vstack([np.concatenate([rt.lam_tilde, rt.v_tilde]) for rt in runtimes])
    mixed = C @ transmitted
    for i in (0, 2):
        np.testing.assert_allclose(runtimes[i].z, mixed[i], atol=1e-12)
    # the adversary keeps its own update bit for bit
    assert np.array_equal(runtimes[1].lam, runtimes[1].lam_tilde)
    assert np.array_equal(runtimes[1].v, runtimes[1].v_tilde)


def test_zero_step_sizes_leave_parameters_unchanged():
    base = build_trainer(small_config())
    trainer = ConsensusActorCritic(base.env, base.models, base.schedule, StepSizeSchedule(0.0, 0.65, 0.0, 0.85),
                                   base.attack)
    runtimes = trainer.initialize()
    before = [rt.copy() for rt in runtimes]
    trainer.train_step(runtimes, 1, (1, 1, 0), 0, weights=ConsensusWeights(np.eye(3), 0.5, frozenset({1})))
    for old, new in zip(before, runtimes):
        np.testing.assert_array_equal(new.z, old.z)
        np.testing.assert_array_equal(new.theta, old.theta)


def test_empty_graph_makes_independent_learners():
    connected = build_trainer(small_config())
    isolated = ConsensusActorCritic(connected.env, connected.models, ConsensusSchedule([CommGraph(3)], adversary=1),
                                    connected.steps, connected.attack)
    a, b = connected.initialize(), isolated.initialize()
    connected.train_step(a, 3, (0, 0, 1), 0, weights=ConsensusWeights(np.eye(3), 0.5, frozenset({1})))
    isolated.train_step(b, 3, (0, 0, 1), 0)
    for left, right in zip(a, b):
        np.testing.assert_array_equal(left.z, right.z)
        np.testing.assert_array_equal(left.theta, right.theta)


def test_training_is_deterministic():
    first = train(small_config())[1]
    second = train(small_config())[1]
    assert [r.team_return for r in first.records] == [r.team_return for r in second.records]
    for left, right in zip(first.runtimes, second.runtimes):
        np.testing.assert_array_equal(left.z, right.z)
        np.testing.assert_array_equal(left.theta, right.theta)
    assert first.steps_taken == sum(r.steps for r in first.records) == 150


def test_frozen_policy_keeps_theta():
    _, result = train(freeze_policy_mode(small_config()))
    for rt in result.runtimes:
        np.testing.assert_array_equal(rt.theta, 0.0)


def test_roles_and_initial_disagreement():
    trainer, result = train(small_config(episodes=1, max_steps=5))
    assert [rt.role for rt in result.runtimes] == [Role.COOPERATIVE, Role.ADVERSARY, Role.COOPERATIVE]
    assert result.initial_disagreement > 0.0
    assert trainer.schedule.adversary == 1


def test_divergence_cap_raises():
    with pytest.raises(DivergenceError) as info:
        train(small_config(divergence_cap=1e-3))
    assert info.value.step == 0
    assert str(info.value).startswith("step 0:")


def test_adversary_outside_network_rejected():
    with pytest.raises(AssumptionViolation) as info:
        build_trainer(small_config(attack={"adversary": 3}))
    assert info.value.assumption == 7


def test_linear_backend_needs_finite_states():
    with pytest.raises(ConfigurationError):
        build_trainer(grid_config(approximator={"backend": "linear"}))


def test_grid_training_with_networks():
    trainer, result = train(grid_config(record_trajectory=True, record_step_metrics=True))
    assert len(result.records) == 2
    for rt in result.initial_runtimes[1:]:
        # critic and reward networks start from a shared draw
        np.testing.assert_array_equal(rt.v, result.initial_runtimes[0].v)
        np.testing.assert_array_equal(rt.lam, result.initial_runtimes[0].lam)
    uniform = trainer.models.policies[0].probs(result.initial_runtimes[0].theta, ((0, 0), (1, 1), (2, 2)))
    np.testing.assert_allclose(uniform, 0.2, atol=1e-15)
    assert all(len(p) == 3 for p in result.trajectory)
    assert len(result.step_records) == result.steps_taken
    assert all(np.all(np.isfinite(rt.z)) for rt in result.runtimes)


def test_grid_state_only_reward_estimator():
    config = grid_config(approximator={"backend": "mlp", "hidden_sizes": [8, 8], "action_independent": True})
    trainer, result = train(config)
    critic, reward_model = trainer.models.critic, trainer.models.reward
    assert reward_model.net.layer_sizes[0] == critic.net.layer_sizes[0]
    lam = result.runtimes[0].lam
    state = ((0, 0), (1, 1), (2, 2))
    assert reward_model.evaluate(lam, state, (0, 0, 0)) == reward_model.evaluate(lam, state, (4, 2, 1))
    assert all(np.all(np.isfinite(rt.z)) for rt in result.runtimes)
