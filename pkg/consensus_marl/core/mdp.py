"""
Finite networked MDPs: joint transition kernel, private per-agent rewards and the
exact quantities derived from them (induced chain, stationary distribution,
averaged reward vectors).

Joint actions are indexed in mixed radix with agent 0 as the most significant digit,
so for action sizes (2, 3) the joint action (1, 2) has index 1 * 3 + 2 = 5. State-action
vectors are laid out state-major: entry ``s * |A| + a``.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from consensus_marl.core.errors import (
    AssumptionViolation,
    ConfigurationError,
    InputError,
    IrreducibilityError,
)

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12
STATIONARY_TOL = 1e-10
DEFAULT_REWARD_BOUND = 100.0


class Role(str, Enum):
    COOPERATIVE = "cooperative"
    ADVERSARY = "adversary"


def encode_joint_action(actions: Sequence[int], action_sizes: Sequence[int]) -> int:
    """Mixed-radix index of a per-agent action tuple (agent 0 most significant)."""
    if len(actions) != len(action_sizes):
        raise InputError(f"expected {len(action_sizes)} local actions, got {len(actions)}")
    index = 0
    for agent, (a, size) in enumerate(zip(actions, action_sizes)):
        if not 0 <= a < size:
            raise InputError(f"action {a} of agent {agent} outside [0, {size})")
        index = index * size + int(a)
    return index


def decode_joint_action(index: int, action_sizes: Sequence[int]) -> Tuple[int, ...]:
    """Inverse of encode_joint_action."""
    total = int(np.prod(action_sizes))
    if not 0 <= index < total:
        raise InputError(f"joint action {index} outside [0, {total})")
    actions = []
    for size in reversed(action_sizes):
        index, a = divmod(index, size)
        actions.append(a)
    return tuple(reversed(actions))


@dataclass(frozen=True)
class NetworkedMdp:
    """
    Finite networked MDP.

    Attributes:
        transitions: P(s'|s,a), shape (|S|, |A|, |S|)
        rewards: r^i(s,a,s'), shape (N, |S|, |A|, |S|)
        action_sizes: |A^i| per agent
        gamma: discount factor in [0, 1)
        roles: cooperative/adversary tag per agent
        reward_bound: R_max, every |r^i| must stay below it
    """
    transitions: np.ndarray
    rewards: np.ndarray
    action_sizes: Tuple[int, ...]
    gamma: float
    roles: Tuple[Role, ...] = ()
    reward_bound: float = DEFAULT_REWARD_BOUND

    def __post_init__(self):
        object.__setattr__(self, "transitions", np.asarray(self.transitions, dtype=float))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "action_sizes", tuple(int(a) for a in self.action_sizes))
        if not self.roles:
            object.__setattr__(self, "roles", (Role.COOPERATIVE,) * len(self.action_sizes))
        object.__setattr__(self, "roles", tuple(Role(r) for r in self.roles))
        self.transitions.setflags(write=False)
        self.rewards.setflags(write=False)
        self._validate()

    def _validate(self):
        P, R = self.transitions, self.rewards
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ConfigurationError(f"transitions must have shape (S, A, S), got {P.shape}")
        num_agents = len(self.action_sizes)
        if num_agents < 1 or any(a < 1 for a in self.action_sizes):
            raise ConfigurationError(f"invalid action sizes {self.action_sizes}")
        if P.shape[1] != int(np.prod(self.action_sizes)):
            raise ConfigurationError(
                f"transitions have {P.shape[1]} joint actions but action sizes "
                f"{self.action_sizes} give {int(np.prod(self.action_sizes))}")
        if R.shape != (num_agents,) + P.shape:
            raise ConfigurationError(f"rewards must have shape {(num_agents,) + P.shape}, got {R.shape}")
        if len(self.roles) != num_agents:
            raise ConfigurationError(f"{len(self.roles)} roles given for {num_agents} agents")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ConfigurationError("transition probabilities must be finite and nonnegative")
        row_error = np.abs(P.sum(axis=2) - 1.0)
        if np.any(row_error > STOCHASTIC_TOL):
            s, a = np.unravel_index(np.argmax(row_error), row_error.shape)
            raise ConfigurationError(f"P(.|s={s}, a={a}) sums to {P[s, a].sum():.15f}, not 1")
        if not np.all(np.isfinite(R)):
            raise ConfigurationError("rewards must be finite")
        if np.max(np.abs(R), initial=0.0) > self.reward_bound:
            raise AssumptionViolation(3, f"reward magnitude {np.max(np.abs(R)):.4g} exceeds bound {self.reward_bound}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"discount factor must lie in [0, 1), got {self.gamma}")
        if sum(role is Role.ADVERSARY for role in self.roles) > 1:
            raise AssumptionViolation(7, "more than one agent is tagged adversary")

    @property
    def num_agents(self) -> int:
        return len(self.action_sizes)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_joint_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def adversary(self) -> Optional[int]:
        for i, role in enumerate(self.roles):
            if role is Role.ADVERSARY:
                return i
        return None

    def with_roles(self, roles: Sequence[Role]) -> "NetworkedMdp":
        return NetworkedMdp(self.transitions, self.rewards, self.action_sizes, self.gamma,
                            tuple(roles), self.reward_bound)

    def local_actions(self, joint: int) -> Tuple[int, ...]:
        return decode_joint_action(joint, self.action_sizes)


@dataclass(frozen=True)
class JointPolicy:
    """
    Product policy pi(a|s) = prod_i pi^i(a^i|s).

    Attributes:
        local: per-agent arrays of shape (|S|, |A^i|)
    """
    local: Tuple[np.ndarray, ...]

    def __post_init__(self):
        local = tuple(np.asarray(p, dtype=float) for p in self.local)
        object.__setattr__(self, "local", local)
        if not local:
            raise ConfigurationError("a joint policy needs at least one agent")
        num_states = local[0].shape[0]
        for i, p in enumerate(local):
            if p.ndim != 2 or p.shape[0] != num_states:
                raise ConfigurationError(f"policy of agent {i} has shape {p.shape}, expected ({num_states}, A^{i})")
            if np.any(~np.isfinite(p)) or np.any(p <= 0.0):
                raise AssumptionViolation(1, f"policy of agent {i} has a non-positive probability")
            if np.any(np.abs(p.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
                raise ConfigurationError(f"policy of agent {i} does not sum to one in every state")

    @classmethod
    def from_local(cls, local: Sequence[np.ndarray]) -> "JointPolicy":
        return cls(tuple(local))

    @classmethod
    def uniform(cls, num_states: int, action_sizes: Sequence[int]) -> "JointPolicy":
        return cls(tuple(np.full((num_states, a), 1.0 / a) for a in action_sizes))

    @property
    def action_sizes(self) -> Tuple[int, ...]:
        return tuple(p.shape[1] for p in self.local)

    @property
    def num_states(self) -> int:
        return self.local[0].shape[0]

    def joint(self) -> np.ndarray:
        """pi(a|s) over joint actions, shape (|S|, |A|)."""
        probs = np.ones((self.num_states, 1))
        for p in self.local:
            probs = (probs[:, :, None] * p[:, None, :]).reshape(self.num_states, -1)
        return probs


@dataclass(frozen=True)
class RewardSummary:
    """
    Averaged reward vectors.

    Attributes:
        state_action: R^i over (s, a) pairs, shape (N, |S|*|A|)
        state: R_theta^i over states, shape (N, |S|)
    """
    state_action: np.ndarray
    state: np.ndarray

    @property
    def team_state_action(self) -> np.ndarray:
        return self.state_action.mean(axis=0)

    @property
    def team_state(self) -> np.ndarray:
        return self.state.mean(axis=0)


def _check_policy(mdp: NetworkedMdp, policy: JointPolicy):
    if policy.num_states != mdp.num_states or policy.action_sizes != mdp.action_sizes:
        raise ConfigurationError(
            f"policy over {policy.num_states} states with actions {policy.action_sizes} "
            f"does not match MDP with {mdp.num_states} states and actions {mdp.action_sizes}")


def transition_matrix_under_policy(mdp: NetworkedMdp, policy: JointPolicy) -> np.ndarray:
    """P_theta(s'|s) = sum_a P(s'|s,a) pi(a|s)."""
    _check_policy(mdp, policy)
    P_theta = np.einsum("sa,sat->st", policy.joint(), mdp.transitions)
    assert np.all(np.abs(P_theta.sum(axis=1) - 1.0) <= 1e-10)
    return P_theta


def check_irreducible_aperiodic(P: np.ndarray):
    """
    Raise IrreducibilityError unless the chain is irreducible and aperiodic.

    Irreducibility is checked through strongly connected components of the support
    graph; aperiodicity through positivity of a power of the support pattern up to the
    Wielandt exponent (n-1)^2 + 1, which covers every exponent up to |S|.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if P.ndim != 2 or P.shape != (n, n):
        raise ConfigurationError(f"transition matrix must be square, got shape {P.shape}")
    support = (P > 0).astype(np.int64)
    num_components, labels = connected_components(support, directed=True, connection="strong")
    if num_components > 1:
        sizes = np.bincount(labels)
        # states outside the largest class cannot be reached from / cannot reach it
        offending = np.flatnonzero(labels != np.argmax(sizes)) if sizes.max() > 1 else np.arange(n)
        raise IrreducibilityError(
            f"chain is reducible: {num_components} communicating classes, "
            f"offending states {offending.tolist()}", offending)
    power = support.copy()
    for _ in range((n - 1) ** 2 + 1):
        if np.all(power > 0):
            return
        power = ((power @ support) > 0).astype(np.int64)
    zero_rows = np.flatnonzero(~np.all(power > 0, axis=1))
    raise IrreducibilityError(f"chain is periodic: no positive power, offending states {zero_rows.tolist()}", zero_rows)


def stationary_distribution(P_theta: np.ndarray, max_iterations: int = 100_000) -> np.ndarray:
    """
    Stationary distribution d with d P = d, sum(d) = 1, d > 0.

    Solved directly from (P^T - I) d = 0 with the last equation replaced by the
    normalization row; falls back to power iteration if that system is ill-conditioned.

    Raises:
        IrreducibilityError: if the chain is reducible or periodic
    """
    P = np.asarray(P_theta, dtype=float)
    check_irreducible_aperiodic(P)
    n = P.shape[0]
    system = P.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    d = None
    if np.linalg.cond(system) < 1e12:
        try:
            d = linalg.solve(system, rhs)
        except linalg.LinAlgError as e:
            logger.warning(f"Direct stationary solve failed ({e}); using power iteration")
    else:
        logger.warning("Stationary system ill-conditioned; using power iteration")
    if d is None or np.max(np.abs(d @ P - d)) > STATIONARY_TOL:
        d = np.full(n, 1.0 / n)
        for _ in range(max_iterations):
            d_next = d @ P
            if np.max(np.abs(d_next - d)) < 1e-15:
                d = d_next
                break
            d = d_next
    d = d / d.sum()
    residual = np.max(np.abs(d @ P - d))
    if residual > STATIONARY_TOL or np.any(d <= 0):
        raise IrreducibilityError(f"stationary distribution not found to tolerance (residual {residual:.3e})")
    return d


def reward_summaries(mdp: NetworkedMdp, policy: JointPolicy) -> RewardSummary:
    """Average rewards r^i(s,a) = sum_s' P r^i and r_theta^i(s) = sum_a pi r^i(s,a)."""
    _check_policy(mdp, policy)
    r_sa = np.einsum("sat,isat->isa", mdp.transitions, mdp.rewards)
    r_s = np.einsum("sa,isa->is", policy.joint(), r_sa)
    return RewardSummary(state_action=r_sa.reshape(mdp.num_agents, -1), state=r_s)


def policy_evaluation(P_theta: np.ndarray, rewards: np.ndarray, gamma: float,
                      tol: float = 1e-13, max_iterations: int = 1_000_000) -> np.ndarray:
    """Iterative policy evaluation v <- R + gamma P v, an independent check on linear solves."""
    v = np.zeros_like(rewards, dtype=float)
    for _ in range(max_iterations):
        v_next = rewards + gamma * (P_theta @ v)
        if np.max(np.abs(v_next - v)) < tol:
            return v_next
        v = v_next
    return v


def sample_step(mdp: NetworkedMdp, s: int, a: int, rng: np.random.Generator) -> Tuple[int, np.ndarray]:
    """Draw s' ~ P(.|s,a) and return it with every agent's reward r^i(s,a,s')."""
    if not 0 <= s < mdp.num_states:
        raise InputError(f"state {s} outside [0, {mdp.num_states})")
    if not 0 <= a < mdp.num_joint_actions:
        raise InputError(f"joint action {a} outside [0, {mdp.num_joint_actions})")
    cdf = np.cumsum(mdp.transitions[s, a])
    s_next = int(min(np.searchsorted(cdf, rng.random(), side="right"), mdp.num_states - 1))
    # point masses must never be left through the clamp above
    while mdp.transitions[s, a, s_next] == 0.0:
        s_next -= 1
    return s_next, mdp.rewards[:, s, a, s_next].copy()


class MdpFile(BaseModel):
    num_states: int
    action_sizes: List[int]
    gamma: float
    roles: Optional[List[Role]] = None
    reward_bound: float = DEFAULT_REWARD_BOUND
    transitions: Optional[List[List[List[float]]]] = None
    transition_entries: Optional[List[Tuple[int, int, int, float]]] = None
    rewards: Optional[List[List[List[List[float]]]]] = None
    reward_entries: Optional[List[Tuple[int, int, int, int, float]]] = None


def mdp_from_dict(data: Dict[str, Any]) -> NetworkedMdp:
    """Build and validate an MDP from its file representation."""
    try:
        spec = MdpFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field_name = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"MDP file field '{field_name}': {first['msg']}") from e
    num_actions = int(np.prod(spec.action_sizes))
    shape = (spec.num_states, num_actions, spec.num_states)
    try:
        if spec.transitions is not None:
            P = np.array(spec.transitions, dtype=float)
        else:
            P = np.zeros(shape)
            for s, a, s_next, p in spec.transition_entries or []:
                P[s, a, s_next] = p
        if spec.rewards is not None:
            R = np.array(spec.rewards, dtype=float)
        else:
            R = np.zeros((len(spec.action_sizes),) + shape)
            for i, s, a, s_next, r in spec.reward_entries or []:
                R[i, s, a, s_next] = r
    except (IndexError, ValueError) as e:
        raise ConfigurationError(f"MDP file entry out of range: {e}") from e
    roles = tuple(spec.roles) if spec.roles else ()
    return NetworkedMdp(P, R, tuple(spec.action_sizes), spec.gamma, roles, spec.reward_bound)


def load_mdp(path: str) -> NetworkedMdp:
    """Load an MDP specification file; every invariant is checked on read."""
    try:
        with open(path) as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Could not read MDP file {path}: {e}")
        raise ConfigurationError(f"could not read MDP file '{path}': {e}") from e
    mdp = mdp_from_dict(data)
    logger.info(f"Loaded MDP from {path}: |S|={mdp.num_states}, |A|={mdp.num_joint_actions}, N={mdp.num_agents}")
    return mdp


def save_mdp(mdp: NetworkedMdp, path: str):
    """Write an MDP in the dense file representation."""
    data = {
        "num_states": mdp.num_states,
        "action_sizes": list(mdp.action_sizes),
        "gamma": mdp.gamma,
        "roles": [r.value for r in mdp.roles],
        "reward_bound": mdp.reward_bound,
        "transitions": mdp.transitions.tolist(),
        "rewards": mdp.rewards.tolist(),
    }
    with open(path, "w") as handle:
        json.dump(data, handle)
