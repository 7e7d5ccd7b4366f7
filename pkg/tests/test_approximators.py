import os
import tempfile

import numpy as np
import pytest

from consensus_marl.core.approximators import (
    LinearRewardEstimate,
    LinearSoftmaxPolicy,
    LinearStateValue,
    MlpApproximator,
    MlpSoftmaxPolicy,
    MlpStateValue,
    StateActionFeatureMap,
    StateFeatureMap,
    build_radial_features,
    build_tabular_features,
    load_arrays,
    mlp_forward,
    mlp_gradient,
    policy_probs,
    project,
    reward_estimate,
    save_arrays,
    score_function,
    value,
)
from consensus_marl.core.errors import ConfigurationError, ParameterError, RankError

FD_STEP = 1e-5


def relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)


def central_difference(fn, x):
    grad = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = FD_STEP
        grad[k] = (fn(x + e) - fn(x - e)) / (2 * FD_STEP)
    return grad


@pytest.fixture
def radial_features():
    return build_radial_features(6, 3, 0.3)


def test_tabular_features_are_identities():
    phi, F = build_tabular_features(2, 2)
    np.testing.assert_array_equal(phi.matrix, np.eye(2))
    np.testing.assert_array_equal(F.matrix, np.eye(4))
    with pytest.raises(ConfigurationError):
        build_tabular_features(200, 100)


def test_rank_deficient_features_rejected():
    with pytest.raises(RankError):
        StateFeatureMap(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))
    with pytest.raises(RankError):
        StateActionFeatureMap(np.ones((4, 2)), (2,))


def test_radial_features_full_rank(radial_features):
    assert radial_features.matrix.shape == (6, 4)
    np.testing.assert_array_equal(radial_features.matrix[:, 0], 1.0)
    with pytest.raises(ConfigurationError):
        build_radial_features(3, 3, 0.3)


def test_value_linear_backend(radial_features):
    critic = LinearStateValue(radial_features)
    assert value(np.zeros(4), 2, critic) == 0.0
    rng = np.random.default_rng(0)
    v1, v2 = rng.normal(size=4), rng.normal(size=4)
    for s in range(6):
        assert value(v1, s, critic) == pytest.approx(float(np.dot(v1, radial_features.matrix[s])), abs=1e-12)
        combined = value(2.0 * v1 - 0.5 * v2, s, critic)
        assert combined == pytest.approx(2.0 * value(v1, s, critic) - 0.5 * value(v2, s, critic), abs=1e-10)
    with pytest.raises(ParameterError):
        value(np.zeros(3), 0, critic)


def test_value_tabular_reads_entry():
    phi, _ = build_tabular_features(3, 1)
    v = np.array([1.5, -2.0, 0.25])
    assert [value(v, s, LinearStateValue(phi)) for s in range(3)] == [1.5, -2.0, 0.25]


def test_reward_estimate_linear_backend():
    phi, F = build_tabular_features(3, 4)
    model = LinearRewardEstimate(F, (2, 2))
    assert reward_estimate(np.zeros(12), 1, (1, 0), model) == 0.0
    lam = np.random.default_rng(1).normal(size=12)
    assert reward_estimate(lam, 1, (1, 0), model) == pytest.approx(lam[1 * 4 + 2])
    assert reward_estimate(lam, 1, 2, model) == reward_estimate(lam, 1, (1, 0), model)


def test_action_independent_reward_features():
    phi, _ = build_tabular_features(3, 4)
    F = StateActionFeatureMap.action_independent_from(phi, (2, 2))
    assert F.action_independent
    model = LinearRewardEstimate(F, (2, 2))
    lam = np.array([0.3, -1.0, 2.0])
    outputs = {reward_estimate(lam, 2, a, model) for a in range(4)}
    assert outputs == {2.0}
    with pytest.raises(ConfigurationError):
        StateActionFeatureMap(np.eye(4), (2,), action_independent=True)


def test_policy_probs_uniform_at_zero():
    policy = LinearSoftmaxPolicy.tabular(3, 4)
    np.testing.assert_allclose(policy_probs(policy, np.zeros(12), 1), 0.25, atol=1e-15)


def test_policy_probs_saturate_below_one():
    policy = LinearSoftmaxPolicy.tabular(1, 2)
    probs = policy_probs(policy, np.array([10.0, -10.0]), 0)
    assert probs[0] < 1.0
    assert probs[1] > 0.0
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_policy_probs_match_direct_softmax():
    rng = np.random.default_rng(4)
    phi = build_radial_features(5, 2, 0.4).matrix
    policy = LinearSoftmaxPolicy.from_state_features(phi, 3)
    theta = rng.normal(size=policy.num_params)
    for s in range(5):
        logits = np.array([theta @ policy.features[s, a] for a in range(3)])
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(policy_probs(policy, theta, s), expected, atol=1e-12)


def test_non_finite_theta_rejected():
    policy = LinearSoftmaxPolicy.tabular(1, 2)
    with pytest.raises(ParameterError):
        policy_probs(policy, np.array([np.nan, 0.0]), 0)


def test_score_uniform_two_actions():
    policy = LinearSoftmaxPolicy.tabular(1, 2)
    np.testing.assert_allclose(score_function(policy, np.zeros(2), 0, 0), [0.5, -0.5])


def test_score_identity_seeded():
    rng = np.random.default_rng(7)
    phi = build_radial_features(5, 3, 0.3).matrix
    policy = LinearSoftmaxPolicy.from_state_features(phi, 3, theta_max=5.0)
    for _ in range(100):
        theta = rng.uniform(-5.0, 5.0, size=policy.num_params)
        s = int(rng.integers(5))
        probs = policy_probs(policy, theta, s)
        expected = sum(probs[a] * score_function(policy, theta, s, a) for a in range(3))
        np.testing.assert_allclose(expected, 0.0, atol=1e-10)


def test_linear_score_matches_finite_differences():
    rng = np.random.default_rng(8)
    phi = build_radial_features(5, 3, 0.3).matrix
    policy = LinearSoftmaxPolicy.from_state_features(phi, 3)
    for _ in range(100):
        theta = rng.normal(size=policy.num_params)
        s, a = int(rng.integers(5)), int(rng.integers(3))
        numeric = central_difference(lambda th: np.log(policy.probs(th, s)[a]), theta)
        assert relative_error(score_function(policy, theta, s, a), numeric) <= 1e-4


def test_mlp_score_matches_finite_differences():
    rng = np.random.default_rng(9)
    encode = np.eye(4).__getitem__
    for _ in range(100):
        net = MlpApproximator.initialize((4, 6, 5, 3), rng)
        policy = MlpSoftmaxPolicy(net, encode)
        theta = net.params + 0.1 * rng.normal(size=net.num_params)
        s, a = int(rng.integers(4)), int(rng.integers(3))
        numeric = central_difference(lambda th: np.log(policy.probs(th, s)[a]), theta)
        assert relative_error(score_function(policy, theta, s, a), numeric) <= 1e-4


def test_mlp_zero_parameters_output_zero():
    net = MlpApproximator((5, 8, 8, 2))
    np.testing.assert_array_equal(mlp_forward(net, np.ones(5)), 0.0)


def test_single_layer_gradient_is_outer_product():
    rng = np.random.default_rng(10)
    net = MlpApproximator((3, 2), rng.normal(size=8))
    x = rng.normal(size=3)
    upstream = np.array([0.7, -1.3])
    grad = mlp_gradient(net, x, upstream)
    np.testing.assert_allclose(grad[:6], np.outer(upstream, x).ravel())
    np.testing.assert_allclose(grad[6:], upstream)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(100):
        net = MlpApproximator.initialize((5, 7, 6, 2), rng)
        net.params = net.params + 0.1 * rng.normal(size=net.num_params)
        x = rng.normal(size=5)
        upstream = rng.normal(size=2)
        numeric = central_difference(lambda p: float(upstream @ net.forward(x, p)), net.params.copy())
        assert relative_error(mlp_gradient(net, x, upstream), numeric) <= 1e-4


def test_mlp_shape_errors():
    net = MlpApproximator((3, 4, 1))
    with pytest.raises(ParameterError):
        net.forward(np.ones(2))
    with pytest.raises(ParameterError):
        MlpApproximator((3, 4, 1), np.zeros(5))


def test_mlp_critic_value_and_grad_consistent():
    rng = np.random.default_rng(12)
    net = MlpApproximator.initialize((4, 5, 5, 1), rng)
    critic = MlpStateValue(net, np.eye(4).__getitem__)
    out, grad = critic.value_and_grad(net.params, 2)
    assert out == critic.evaluate(net.params, 2)
    assert grad.shape == (net.num_params,)


def test_zero_output_layer_gives_uniform_policy():
    net = MlpApproximator.initialize((4, 6, 6, 5), np.random.default_rng(0), zero_output=True)
    policy = MlpSoftmaxPolicy(net, np.eye(4).__getitem__)
    np.testing.assert_allclose(policy.probs(net.params, 3), 0.2, atol=1e-15)


def test_projection_clamps_coordinatewise():
    np.testing.assert_array_equal(project(np.array([-60.0, 10.0, 51.0]), 50.0), [-50.0, 10.0, 50.0])


def test_array_checkpoint_format():
    arrays = {"theta_0": np.arange(6.0).reshape(2, 3) / 7.0, "v_0": np.array([1e-300, -2.5])}
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "params.txt")
        save_arrays(path, arrays)
        with open(path) as handle:
            first = handle.readline().split("\t")
        loaded = load_arrays(path)
    assert first[0] == "theta_0" and first[1] == "2,3"
    for name, array in arrays.items():
        np.testing.assert_array_equal(loaded[name], array)
