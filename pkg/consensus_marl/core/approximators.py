"""
Function approximation backends.

Every approximator keeps its parameters as one flat float vector so that consensus
can mix critics and reward estimators elementwise regardless of backend. Linear
backends evaluate features by state index; MLP backends evaluate an encoder that
turns the environment state into an input vector.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from consensus_marl.core.errors import ConfigurationError, ParameterError, RankError
from consensus_marl.core.mdp import encode_joint_action

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
MAX_TABULAR_SIZE = 10_000
DEFAULT_THETA_MAX = 50.0


def check_full_column_rank(matrix: np.ndarray, name: str):
    """Raise RankError unless the smallest singular value exceeds 1e-8 x the largest."""
    singular = np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False)
    if matrix.shape[0] < matrix.shape[1] or singular.size == 0 or singular[-1] <= RANK_TOL * singular[0]:
        smallest = singular[-1] if singular.size else 0.0
        raise RankError(
            f"{name} of shape {matrix.shape} is not full column rank "
            f"(smallest singular value {smallest:.3e})")


@dataclass(frozen=True)
class StateFeatureMap:
    """phi(s) as rows of the |S| x L matrix Phi."""
    matrix: np.ndarray
    bound: float = 1e6

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", matrix)
        if matrix.ndim != 2:
            raise ConfigurationError(f"state feature matrix must be 2-D, got shape {matrix.shape}")
        check_full_column_rank(matrix, "state feature matrix")
        if np.max(np.abs(matrix)) > self.bound:
            raise ConfigurationError(f"state features exceed the bound {self.bound}")

    @property
    def num_features(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, s: int) -> np.ndarray:
        return self.matrix[s]


@dataclass(frozen=True)
class StateActionFeatureMap:
    """f(s, a) as rows s * |A| + a of the (|S|*|A|) x M matrix F."""
    matrix: np.ndarray
    action_sizes: Tuple[int, ...]
    action_independent: bool = False
    bound: float = 1e6

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "action_sizes", tuple(self.action_sizes))
        if matrix.ndim != 2 or matrix.shape[0] % self.num_joint_actions:
            raise ConfigurationError(
                f"state-action feature matrix of shape {matrix.shape} does not fit {self.num_joint_actions} joint actions")
        check_full_column_rank(matrix, "state-action feature matrix")
        if np.max(np.abs(matrix)) > self.bound:
            raise ConfigurationError(f"state-action features exceed the bound {self.bound}")
        if self.action_independent:
            blocks = matrix.reshape(-1, self.num_joint_actions, matrix.shape[1])
            if not np.all(blocks == blocks[:, :1, :]):
                raise ConfigurationError("action_independent features differ across actions")

    @classmethod
    def action_independent_from(cls, state_features: StateFeatureMap, action_sizes: Sequence[int]) -> "StateActionFeatureMap":
        """f(s, a) = phi(s); the joint action never enters the reward estimate."""
        num_actions = int(np.prod(action_sizes))
        return cls(np.repeat(state_features.matrix, num_actions, axis=0), tuple(action_sizes), True)

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.action_sizes))

    @property
    def num_features(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, s: int, a: int) -> np.ndarray:
        return self.matrix[s * self.num_joint_actions + a]


def build_tabular_features(num_states: int, num_actions: int) -> Tuple[StateFeatureMap, StateActionFeatureMap]:
    """Identity features: Phi = I_|S| and F = I_(|S||A|)."""
    if num_states * num_actions > MAX_TABULAR_SIZE:
        raise ConfigurationError(
            f"tabular features need |S|*|A| <= {MAX_TABULAR_SIZE}, got {num_states * num_actions}")
    return (StateFeatureMap(np.eye(num_states)),
            StateActionFeatureMap(np.eye(num_states * num_actions), (num_actions,)))


def build_radial_features(num_states: int, num_centers: int, width: float) -> StateFeatureMap:
    """Gaussian bumps over the normalized state index, plus a constant column."""
    if num_centers + 1 > num_states:
        raise ConfigurationError(f"{num_centers} centers need at least {num_centers + 1} states")
    positions = np.linspace(0.0, 1.0, num_states)[:, None]
    centers = np.linspace(0.0, 1.0, num_centers)[None, :]
    bumps = np.exp(-((positions - centers) ** 2) / (2.0 * width ** 2))
    return StateFeatureMap(np.hstack([np.ones((num_states, 1)), bumps]))


# ---------------------------------------------------------------------------
# Multilayer perceptron

@dataclass
class MlpApproximator:
    """
    Fully connected network with tanh hidden activations and a linear output.

    Parameters are stored flat, layer by layer: W (out x in, row-major) then b.

    Attributes:
        layer_sizes: (input, hidden..., output)
        params: flat parameter vector
    """
    layer_sizes: Tuple[int, ...]
    params: np.ndarray = None

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigurationError(f"invalid layer sizes {self.layer_sizes}")
        if self.params is None:
            self.params = np.zeros(self.num_params)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.num_params,):
            raise ParameterError(f"network with layers {self.layer_sizes} needs {self.num_params} parameters, got {self.params.shape}")

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator,
                   zero_output: bool = False) -> "MlpApproximator":
        """Glorot-uniform weights, zero biases; optionally a zero output layer."""
        net = cls(tuple(layer_sizes))
        chunks = []
        for k, (fan_in, fan_out) in enumerate(zip(net.layer_sizes[:-1], net.layer_sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            if zero_output and k == len(net.layer_sizes) - 2:
                W = np.zeros_like(W)
            chunks.extend([W.ravel(), np.zeros(fan_out)])
        net.params = np.concatenate(chunks)
        return net

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def layers(self, params: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        params = self.params if params is None else params
        out, offset = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = params[offset:offset + fan_out]
            offset += fan_out
            out.append((W, b))
        return out

    def _forward(self, x: np.ndarray, params: Optional[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_size,):
            raise ParameterError(f"network expects input of shape ({self.input_size},), got {x.shape}")
        layers = self.layers(params)
        activations = [x]
        h = x
        for k, (W, b) in enumerate(layers):
            z = W @ h + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            activations.append(h)
        return h, activations

    def forward(self, x: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        return self._forward(x, params)[0]

    def gradient(self, x: np.ndarray, upstream, params: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Backpropagate ``upstream`` (dL/doutput) to the flat parameter gradient.

        Returns:
            (output, gradient) so callers needing both pay for one forward pass.
        """
        output, activations = self._forward(x, params)
        delta = np.broadcast_to(np.asarray(upstream, dtype=float), output.shape).copy()
        layers = self.layers(params)
        grads = []
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            h_in = activations[k]
            grads.append(delta)
            grads.append(np.outer(delta, h_in).ravel())
            if k > 0:
                delta = (W.T @ delta) * (1.0 - h_in ** 2)
        return output, np.concatenate(grads[::-1])


def mlp_forward(net: MlpApproximator, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def mlp_gradient(net: MlpApproximator, x: np.ndarray, upstream) -> np.ndarray:
    """Gradient of upstream . net(x) with respect to the flat parameters."""
    return net.gradient(x, upstream)[1]


# ---------------------------------------------------------------------------
# Critic and reward-estimator backends

class LinearStateValue:
    """V(s; v) = v . phi(s)."""

    def __init__(self, features: StateFeatureMap):
        self.features = features
        self.num_params = features.num_features

    def evaluate(self, v: np.ndarray, s) -> float:
        return float(v @ self.features(s))

    def value_and_grad(self, v: np.ndarray, s) -> Tuple[float, np.ndarray]:
        phi = self.features(s)
        return float(v @ phi), phi


class MlpStateValue:
    """V(s; v) = net(encode(s); v)."""

    def __init__(self, net: MlpApproximator, encode: Callable):
        if net.output_size != 1:
            raise ConfigurationError("critic network must have a single output")
        self.net = net
        self.encode = encode
        self.num_params = net.num_params

    def evaluate(self, v: np.ndarray, s) -> float:
        return float(self.net.forward(self.encode(s), v)[0])

    def value_and_grad(self, v: np.ndarray, s) -> Tuple[float, np.ndarray]:
        out, grad = self.net.gradient(self.encode(s), 1.0, v)
        return float(out[0]), grad


class LinearRewardEstimate:
    """r(s, a; lambda) = lambda . f(s, a) with a per-agent action tuple encoded in mixed radix."""

    def __init__(self, features: StateActionFeatureMap, action_sizes: Sequence[int]):
        if int(np.prod(action_sizes)) != features.num_joint_actions:
            raise ConfigurationError("reward features do not match the joint action space")
        self.features = features
        self.action_sizes = tuple(action_sizes)
        self.num_params = features.num_features

    def _row(self, s, actions) -> np.ndarray:
        a = actions if isinstance(actions, (int, np.integer)) else encode_joint_action(actions, self.action_sizes)
        return self.features(s, a)

    def evaluate(self, lam: np.ndarray, s, actions) -> float:
        return float(lam @ self._row(s, actions))

    def value_and_grad(self, lam: np.ndarray, s, actions) -> Tuple[float, np.ndarray]:
        f = self._row(s, actions)
        return float(lam @ f), f


class MlpRewardEstimate:
    """r(s, a; lambda) = net(encode(s, a); lambda)."""

    def __init__(self, net: MlpApproximator, encode: Callable):
        if net.output_size != 1:
            raise ConfigurationError("reward network must have a single output")
        self.net = net
        self.encode = encode
        self.num_params = net.num_params

    def evaluate(self, lam: np.ndarray, s, actions) -> float:
        return float(self.net.forward(self.encode(s, actions), lam)[0])

    def value_and_grad(self, lam: np.ndarray, s, actions) -> Tuple[float, np.ndarray]:
        out, grad = self.net.gradient(self.encode(s, actions), 1.0, lam)
        return float(out[0]), grad


def value(v: np.ndarray, s, backend) -> float:
    """Critic output V(s; v)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (backend.num_params,):
        raise ParameterError(f"critic expects {backend.num_params} parameters, got shape {v.shape}")
    return backend.evaluate(v, s)


def reward_estimate(lam: np.ndarray, s, a, backend) -> float:
    """Reward estimator output r(s, a; lambda)."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (backend.num_params,):
        raise ParameterError(f"reward estimator expects {backend.num_params} parameters, got shape {lam.shape}")
    return backend.evaluate(lam, s, a)


# ---------------------------------------------------------------------------
# Softmax actors

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - np.max(logits))
    return z / z.sum()


def _check_theta(theta: np.ndarray, size: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (size,):
        raise ParameterError(f"policy expects {size} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ParameterError("policy parameters must be finite")
    return theta


class LinearSoftmaxPolicy:
    """
    pi^i(a^i|s) proportional to exp(theta . x(s, a^i)).

    Attributes:
        features: x(s, a^i), shape (|S|, |A^i|, m)
        theta_max: half-width of the projection box
    """

    def __init__(self, features: np.ndarray, theta_max: float = DEFAULT_THETA_MAX):
        self.features = np.asarray(features, dtype=float)
        if self.features.ndim != 3:
            raise ConfigurationError(f"action features must have shape (S, A, m), got {self.features.shape}")
        self.theta_max = float(theta_max)
        self.num_actions = self.features.shape[1]
        self.num_params = self.features.shape[2]

    @classmethod
    def from_state_features(cls, phi: np.ndarray, num_actions: int,
                            theta_max: float = DEFAULT_THETA_MAX) -> "LinearSoftmaxPolicy":
        """x(s, a) = phi(s) (x) e_a, one block of logit weights per local action."""
        phi = np.asarray(phi, dtype=float)
        return cls(np.einsum("sl,ab->sabl", phi, np.eye(num_actions)).reshape(phi.shape[0], num_actions, -1), theta_max)

    @classmethod
    def tabular(cls, num_states: int, num_actions: int, theta_max: float = DEFAULT_THETA_MAX) -> "LinearSoftmaxPolicy":
        """One-hot state x action features; theta is a table of logits."""
        return cls(np.eye(num_states * num_actions).reshape(num_states, num_actions, -1), theta_max)

    def probs(self, theta: np.ndarray, s) -> np.ndarray:
        theta = _check_theta(theta, self.num_params)
        return _softmax(self.features[s] @ theta)

    def score(self, theta: np.ndarray, s, a: int) -> np.ndarray:
        x = self.features[s]
        pi = self.probs(theta, s)
        return x[a] - pi @ x


class MlpSoftmaxPolicy:
    """pi^i(.|s) = softmax(net(encode(s); theta)); the network outputs one logit per action."""

    def __init__(self, net: MlpApproximator, encode: Callable, theta_max: float = DEFAULT_THETA_MAX):
        self.net = net
        self.encode = encode
        self.theta_max = float(theta_max)
        self.num_actions = net.output_size
        self.num_params = net.num_params

    def probs(self, theta: np.ndarray, s) -> np.ndarray:
        theta = _check_theta(theta, self.num_params)
        return _softmax(self.net.forward(self.encode(s), theta))

    def score(self, theta: np.ndarray, s, a: int) -> np.ndarray:
        theta = _check_theta(theta, self.num_params)
        x = self.encode(s)
        pi = _softmax(self.net.forward(x, theta))
        upstream = -pi
        upstream[a] += 1.0
        return self.net.gradient(x, upstream, theta)[1]


def policy_probs(policy, theta: np.ndarray, s) -> np.ndarray:
    """Action distribution of one agent; strictly positive and normalized."""
    probs = policy.probs(theta, s)
    assert np.all(probs > 0.0), "softmax produced a zero probability"
    return probs


def score_function(policy, theta: np.ndarray, s, a: int) -> np.ndarray:
    """psi = grad_theta log pi(a|s; theta)."""
    return policy.score(theta, s, a)


def project(theta: np.ndarray, theta_max: float) -> np.ndarray:
    """Projection onto the box [-theta_max, theta_max]^m."""
    return np.clip(theta, -theta_max, theta_max)


# ---------------------------------------------------------------------------
# Checkpoints: one array per line, "name<TAB>shape<TAB>values"

def save_arrays(path: str, arrays: Dict[str, np.ndarray]):
    with open(path, "w") as handle:
        for name, array in arrays.items():
            array = np.asarray(array, dtype=float)
            shape = ",".join(str(n) for n in array.shape)
            values = " ".join(repr(float(x)) for x in array.ravel())
            handle.write(f"{name}\t{shape}\t{values}\n")


def load_arrays(path: str) -> Dict[str, np.ndarray]:
    arrays = {}
    with open(path) as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, shape, values = line.split("\t")
                dims = tuple(int(n) for n in shape.split(",")) if shape else ()
                data = np.array([float(x) for x in values.split()], dtype=float)
                arrays[name] = data.reshape(dims)
            except ValueError as e:
                raise ConfigurationError(f"{path}:{lineno}: malformed array line ({e})") from e
    return arrays
