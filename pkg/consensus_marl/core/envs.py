"""
Environments: the multi-agent grid world and seeded random small MDPs.

Grid positions are (x, y) tuples with (0, 0) the top-left cell, so UP decreases y.
All agents move simultaneously from their pre-step positions; a move that would
leave the grid keeps the agent where it is.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np

from consensus_marl.core.errors import ConfigurationError, IrreducibilityError
from consensus_marl.core.mdp import (
    JointPolicy,
    NetworkedMdp,
    Role,
    encode_joint_action,
    sample_step,
    stationary_distribution,
    transition_matrix_under_policy,
)

logger = logging.getLogger(__name__)

LEFT, RIGHT, UP, DOWN, STAY = range(5)
ACTION_OFFSETS = {LEFT: (-1, 0), RIGHT: (1, 0), UP: (0, -1), DOWN: (0, 1), STAY: (0, 0)}

Positions = Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class GridWorldConfig:
    width: int
    height: int
    desired: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "desired", tuple((int(x), int(y)) for x, y in self.desired))
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.desired:
            raise ConfigurationError("grid world needs at least one agent")
        for i, (x, y) in enumerate(self.desired):
            if not self.inside((x, y)):
                raise ConfigurationError(f"desired position ({x}, {y}) of agent {i} is outside the grid")

    @property
    def num_agents(self) -> int:
        return len(self.desired)

    def inside(self, position: Tuple[int, int]) -> bool:
        x, y = position
        return 0 <= x < self.width and 0 <= y < self.height


def grid_step(config: GridWorldConfig, positions: Positions, actions: Sequence[int]) -> Tuple[Positions, np.ndarray]:
    """
    Move every agent by its action offset, clamped at the border, and score the result.

    r^i = -|x^i - x_des^i| - |y^i - y_des^i| - q^i, where q^i counts the other agents
    sharing agent i's new cell. Agents swapping cells are not counted as colliding.
    """
    moved = []
    for (x, y), a in zip(positions, actions):
        dx, dy = ACTION_OFFSETS[int(a)]
        moved.append((min(max(x + dx, 0), config.width - 1), min(max(y + dy, 0), config.height - 1)))
    new_positions = tuple(moved)
    rewards = np.empty(config.num_agents)
    for i, (x, y) in enumerate(new_positions):
        x_des, y_des = config.desired[i]
        collisions = sum(1 for j, other in enumerate(new_positions) if j != i and other == (x, y))
        rewards[i] = -abs(x - x_des) - abs(y - y_des) - collisions
    return new_positions, rewards


def grid_features(config: GridWorldConfig, positions: Positions) -> np.ndarray:
    """Normalized coordinates of all agents, [x^1, y^1, x^2, y^2, ...] in [0, 1]."""
    sx = 1.0 / (config.width - 1) if config.width > 1 else 0.0
    sy = 1.0 / (config.height - 1) if config.height > 1 else 0.0
    return np.array([c for x, y in positions for c in (x * sx, y * sy)], dtype=float)


def terminal_check(config: GridWorldConfig, positions: Positions) -> bool:
    return all(tuple(p) == d for p, d in zip(positions, config.desired))


class Environment(Protocol):
    num_agents: int
    action_sizes: Tuple[int, ...]
    gamma: float
    tabular: bool

    def reset(self, rng: np.random.Generator): ...

    def step(self, state, actions: Tuple[int, ...], rng: np.random.Generator) -> Tuple[object, np.ndarray, bool]: ...

    def encode(self, state) -> np.ndarray: ...


class GridWorldEnvironment:
    """Episodic grid world; states are position tuples."""
    tabular = False

    def __init__(self, config: GridWorldConfig, gamma: float):
        if not 0.0 <= gamma < 1.0:
            raise ConfigurationError(f"discount factor must lie in [0, 1), got {gamma}")
        self.config = config
        self.gamma = gamma
        self.num_agents = config.num_agents
        self.action_sizes = (len(ACTION_OFFSETS),) * config.num_agents

    def reset(self, rng: np.random.Generator) -> Positions:
        """Independent uniform cells per agent; shared cells allowed."""
        xs = rng.integers(0, self.config.width, size=self.num_agents)
        ys = rng.integers(0, self.config.height, size=self.num_agents)
        return tuple((int(x), int(y)) for x, y in zip(xs, ys))

    def step(self, state: Positions, actions, rng=None):
        new_positions, rewards = grid_step(self.config, state, actions)
        return new_positions, rewards, terminal_check(self.config, new_positions)

    def encode(self, state: Positions) -> np.ndarray:
        return grid_features(self.config, state)


class MdpEnvironment:
    """Continuing task over a NetworkedMdp; states are indices."""
    tabular = True

    def __init__(self, mdp: NetworkedMdp):
        self.mdp = mdp
        self.gamma = mdp.gamma
        self.num_agents = mdp.num_agents
        self.action_sizes = mdp.action_sizes
        self._identity = np.eye(mdp.num_states)

    def reset(self, rng: np.random.Generator) -> int:
        return int(rng.integers(0, self.mdp.num_states))

    def step(self, state: int, actions, rng: np.random.Generator):
        s_next, rewards = sample_step(self.mdp, state, encode_joint_action(actions, self.action_sizes), rng)
        return s_next, rewards, False

    def encode(self, state: int) -> np.ndarray:
        return self._identity[state]


@dataclass(frozen=True)
class SmallMdpSpec:
    """
    Recipe for a random small MDP.

    Attributes:
        num_states: |S|
        action_sizes: |A^i| per agent
        reward_range: (low, high) for uniform rewards r^i(s,a,s')
        concentration: Dirichlet concentration of each P(.|s,a)
        gamma: discount factor
        seed: generator seed
        adversary: agent tagged adversary, if any
        max_retries: regenerations allowed when the uniform-policy chain is not ergodic
    """
    num_states: int
    action_sizes: Tuple[int, ...]
    reward_range: Tuple[float, float] = (0.0, 1.0)
    concentration: float = 1.0
    gamma: float = 0.9
    seed: int = 0
    adversary: Optional[int] = None
    max_retries: int = 100


def generate_small_mdp(spec: SmallMdpSpec) -> NetworkedMdp:
    """Deterministic in spec.seed; the chain under the uniform policy is irreducible and aperiodic."""
    low, high = spec.reward_range
    if spec.num_states < 1 or high < low or spec.concentration <= 0:
        raise ConfigurationError(f"invalid small MDP spec {spec}")
    num_agents = len(spec.action_sizes)
    num_actions = int(np.prod(spec.action_sizes))
    roles = tuple(Role.ADVERSARY if i == spec.adversary else Role.COOPERATIVE for i in range(num_agents))
    rng = np.random.default_rng(spec.seed)
    for attempt in range(spec.max_retries):
        P = rng.dirichlet(np.full(spec.num_states, spec.concentration), size=(spec.num_states, num_actions))
        P /= P.sum(axis=2, keepdims=True)
        R = rng.uniform(low, high, size=(num_agents, spec.num_states, num_actions, spec.num_states))
        mdp = NetworkedMdp(P, R, tuple(spec.action_sizes), spec.gamma, roles,
                           reward_bound=max(100.0, abs(low), abs(high)))
        try:
            stationary_distribution(transition_matrix_under_policy(mdp, JointPolicy.uniform(spec.num_states, spec.action_sizes)))
        except IrreducibilityError:
            logger.warning(f"Generated MDP not ergodic (attempt {attempt + 1}/{spec.max_retries}); regenerating")
            continue
        logger.info(f"Generated small MDP: |S|={spec.num_states}, actions={spec.action_sizes}, seed={spec.seed}")
        return mdp
    raise ConfigurationError(f"no ergodic MDP found in {spec.max_retries} attempts for seed {spec.seed}")
