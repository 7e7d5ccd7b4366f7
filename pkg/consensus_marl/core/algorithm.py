"""
Consensus actor-critic under a single-adversary attack.

Each step every agent updates its reward estimator and critic from its own private
reward, takes a projected actor step driven by the estimated network TD error, and
transmits (lambda~, v~). The consensus step then mixes the transmitted vectors with
C_t; the adversary transmits like everyone else but its own row is e_j, so it never
takes in anything from the network. Only (lambda~, v~) cross agent boundaries.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from consensus_marl.config import (
    RunConfig,
    check_attack_roster,
)
from consensus_marl.core.approximators import (
    LinearRewardEstimate,
    LinearSoftmaxPolicy,
    LinearStateValue,
    MlpApproximator,
    MlpRewardEstimate,
    MlpSoftmaxPolicy,
    MlpStateValue,
    StateActionFeatureMap,
    build_radial_features,
    build_tabular_features,
    project,
)
from consensus_marl.core.consensus import CommGraph, ConsensusSchedule, ConsensusWeights, apply_consensus, load_schedule
from consensus_marl.core.envs import (
    GridWorldConfig,
    GridWorldEnvironment,
    MdpEnvironment,
    SmallMdpSpec,
    generate_small_mdp,
)
from consensus_marl.core.errors import AssumptionViolation, ConfigurationError, DivergenceError
from consensus_marl.core.mdp import Role, encode_joint_action, load_mdp
from consensus_marl.metrics import MetricsRecord, StepRecord

logger = logging.getLogger(__name__)

ENV_STREAM, INIT_STREAM, POLICY_STREAM, SCHEDULE_STREAM = range(4)


@dataclass
class AgentRuntime:
    """One agent's parameters and its pre-consensus intermediates."""
    agent_id: int
    role: Role
    theta: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    v_tilde: np.ndarray = None
    lam_tilde: np.ndarray = None

    def __post_init__(self):
        if self.v_tilde is None:
            self.v_tilde = self.v.copy()
        if self.lam_tilde is None:
            self.lam_tilde = self.lam.copy()

    @property
    def z(self) -> np.ndarray:
        """Stacked consensus parameters [lambda, v]."""
        return np.concatenate([self.lam, self.v])

    def copy(self) -> "AgentRuntime":
        return AgentRuntime(self.agent_id, self.role, self.theta.copy(), self.v.copy(), self.lam.copy(),
                            self.v_tilde.copy(), self.lam_tilde.copy())


@dataclass(frozen=True)
class StepSizeSchedule:
    """alpha_v,t = c_v / (t0 + t)^p_v and alpha_theta,t = c_theta / (t0 + t)^p_theta."""
    critic_scale: float = 1.0
    critic_exponent: float = 0.65
    actor_scale: float = 1.0
    actor_exponent: float = 0.85
    offset: float = 1.0

    def __post_init__(self):
        if not 0.5 < self.critic_exponent < self.actor_exponent <= 1.0:
            raise AssumptionViolation(
                6, f"need 0.5 < p_v < p_theta <= 1, got p_v={self.critic_exponent}, p_theta={self.actor_exponent}")
        if self.critic_scale < 0 or self.actor_scale < 0 or self.offset <= 0:
            raise ConfigurationError("step-size scales must be >= 0 and the offset > 0")

    def critic(self, t: int) -> float:
        return self.critic_scale / (self.offset + t) ** self.critic_exponent

    def actor(self, t: int) -> float:
        return self.actor_scale / (self.offset + t) ** self.actor_exponent

    def frozen(self) -> "StepSizeSchedule":
        return replace(self, actor_scale=0.0)


@dataclass(frozen=True)
class RewardTransform:
    """How the adversary turns its true reward into the reward it learns from."""
    kind: str = "identity"
    scale: float = 1.0
    shift: float = 0.0
    table: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("identity", "affine", "table"):
            raise ConfigurationError(f"unknown reward transform '{self.kind}'")
        if self.kind == "table" and self.table is None:
            raise ConfigurationError("table reward transform needs a reward table r(s, a, s')")

    def __call__(self, r: float, s, a: int, s_next) -> float:
        if self.kind == "identity":
            return r
        if self.kind == "affine":
            return self.scale * r + self.shift
        return float(self.table[s, a, s_next])

    def tabulate(self, rewards: np.ndarray) -> np.ndarray:
        """Apply the transform to a whole reward table r(s, a, s')."""
        if self.kind == "identity":
            return np.asarray(rewards, dtype=float)
        if self.kind == "affine":
            return self.scale * np.asarray(rewards, dtype=float) + self.shift
        return np.asarray(self.table, dtype=float)


@dataclass(frozen=True)
class AttackModel:
    adversary: int
    omit_consensus: bool = True
    reward_transform: RewardTransform = RewardTransform()


@dataclass
class Approximators:
    """Shared architectures: one critic, one reward estimator, one actor per agent."""
    critic: object
    reward: object
    policies: List[object]


# ---------------------------------------------------------------------------
# Single-agent updates

def td_error(r: float, v: np.ndarray, s, s_next, gamma: float, critic) -> float:
    """delta = r + gamma V(s'; v) - V(s; v)."""
    return r + gamma * critic.evaluate(v, s_next) - critic.evaluate(v, s)


def estimated_td_error(lam: np.ndarray, v: np.ndarray, s, a, s_next, gamma: float, critic, reward_model) -> float:
    """Delta = r(s, a; lambda) + gamma V(s'; v) - V(s; v)."""
    return reward_model.evaluate(lam, s, a) + gamma * critic.evaluate(v, s_next) - critic.evaluate(v, s)


def reward_param_update(lam: np.ndarray, r: float, s, a, alpha: float, reward_model) -> np.ndarray:
    """lambda~ = lambda + alpha (r - r(s, a; lambda)) grad r(s, a; lambda)."""
    r_bar, grad = reward_model.value_and_grad(lam, s, a)
    return lam + alpha * (r - r_bar) * grad


def critic_update(v: np.ndarray, delta: float, s, alpha: float, critic) -> np.ndarray:
    """v~ = v + alpha delta grad V(s; v)."""
    _, grad = critic.value_and_grad(v, s)
    return v + alpha * delta * grad


def actor_update(theta: np.ndarray, Delta: float, psi: np.ndarray, alpha: float, theta_max: float) -> np.ndarray:
    """theta' = Gamma(theta + alpha Delta psi), Gamma the projection onto the box."""
    return project(theta + alpha * Delta * psi, theta_max)


def disagreement_norm(Z: np.ndarray) -> float:
    """||z - 1 (x) <z>|| with <z> the network average of the stacked parameters."""
    return float(np.linalg.norm(Z - Z.mean(axis=0)))


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    index = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return min(index, len(probs) - 1)


@dataclass
class StepOutcome:
    next_state: object
    next_actions: Optional[Tuple[int, ...]]
    rewards: np.ndarray
    terminal: bool
    estimated_reward: float
    disagreement: float
    max_z_norm: float


@dataclass
class TrainingResult:
    records: List[MetricsRecord]
    runtimes: List[AgentRuntime]
    initial_runtimes: List[AgentRuntime]
    step_records: List[StepRecord] = field(default_factory=list)
    trajectory: List[object] = field(default_factory=list)
    steps_taken: int = 0
    initial_disagreement: float = 0.0
    final_disagreement: float = 0.0
    max_z_norm: float = 0.0


class ConsensusActorCritic:
    """
    Training loop for a network of actor-critic agents.

    Attributes:
        env: environment exposing reset/step/encode
        models: shared approximator architectures
        schedule: time-varying consensus matrices
        steps: step-size schedule
        attack: adversary description, or None for a clean network
    """

    def __init__(self, env, models: Approximators, schedule: ConsensusSchedule, steps: StepSizeSchedule,
                 attack: Optional[AttackModel] = None, seed: int = 0, divergence_cap: float = 1e6,
                 record_step_metrics: bool = False, record_trajectory: bool = False):
        if schedule.num_agents != env.num_agents or len(models.policies) != env.num_agents:
            raise ConfigurationError(
                f"{env.num_agents} agents but {schedule.num_agents} schedule rows and {len(models.policies)} policies")
        if attack is not None:
            if not 0 <= attack.adversary < env.num_agents:
                raise AssumptionViolation(7, f"adversary {attack.adversary} is not an agent of the network")
            if attack.omit_consensus and schedule.adversary != attack.adversary:
                raise ConfigurationError("schedule adversary row does not match the attack model")
        elif schedule.adversary is not None:
            raise ConfigurationError("schedule has an adversary row but no attack is configured")
        self.env = env
        self.models = models
        self.schedule = schedule
        self.steps = steps
        self.attack = attack
        self.seed = seed
        self.divergence_cap = divergence_cap
        self.record_step_metrics = record_step_metrics
        self.record_trajectory = record_trajectory
        self.env_rng = np.random.default_rng([seed, ENV_STREAM])
        self.policy_rngs = [np.random.default_rng([seed, POLICY_STREAM, i]) for i in range(env.num_agents)]
        self._lam_size = models.reward.num_params

    # -- initialization ------------------------------------------------------

    def initialize(self, init_scale: float = 1.0) -> List[AgentRuntime]:
        """
        Initial parameters.

        Linear critics/reward estimators get heterogeneous per-agent Gaussian draws;
        network ones share a single draw so elementwise mixing compares matching
        units. Actors start at the uniform policy (linear: zeros, network: zero
        output layer).
        """
        rng = np.random.default_rng([self.seed, INIT_STREAM])
        n = self.env.num_agents
        shared = {}
        for name, model in (("v", self.models.critic), ("lam", self.models.reward)):
            if hasattr(model, "net"):
                shared[name] = MlpApproximator.initialize(model.net.layer_sizes, rng).params
        runtimes = []
        for i in range(n):
            policy = self.models.policies[i]
            if hasattr(policy, "net"):
                theta = MlpApproximator.initialize(policy.net.layer_sizes, rng, zero_output=True).params
            else:
                theta = np.zeros(policy.num_params)
            v = shared["v"].copy() if "v" in shared else init_scale * rng.standard_normal(self.models.critic.num_params)
            lam = shared["lam"].copy() if "lam" in shared else init_scale * rng.standard_normal(self.models.reward.num_params)
            role = Role.ADVERSARY if self.attack is not None and i == self.attack.adversary else Role.COOPERATIVE
            runtimes.append(AgentRuntime(i, role, theta, v, lam))
        return runtimes

    # -- one step of the algorithm -------------------------------------------

    def sample_actions(self, runtimes: Sequence[AgentRuntime], state) -> Tuple[int, ...]:
        return tuple(sample_action(self.models.policies[i].probs(rt.theta, state), self.policy_rngs[i])
                     for i, rt in enumerate(runtimes))

    def train_step(self, runtimes: List[AgentRuntime], state, actions: Tuple[int, ...], t: int,
                   weights: Optional[ConsensusWeights] = None) -> StepOutcome:
        """
        One iteration: local updates for every agent, then the consensus barrier,
        then next actions from the updated policies.

        Raises:
            DivergenceError: non-finite or unbounded parameters after the step
        """
        critic, reward_model, policies = self.models.critic, self.models.reward, self.models.policies
        s_next, true_rewards, terminal = self.env.step(state, actions, self.env_rng)
        alpha_v = self.steps.critic(t)
        alpha_theta = self.steps.actor(t)
        gamma = 0.0 if terminal else self.env.gamma
        estimated = 0.0

        for i, agent in enumerate(runtimes):
            r = float(true_rewards[i])
            if self.attack is not None and i == self.attack.adversary:
                r = self.attack.reward_transform(r, state, encode_joint_action(actions, self.env.action_sizes), s_next)
            delta = td_error(r, agent.v, state, s_next, gamma, critic)
            Delta = estimated_td_error(agent.lam, agent.v, state, actions, s_next, gamma, critic, reward_model)
            agent.lam_tilde = reward_param_update(agent.lam, r, state, actions, alpha_v, reward_model)
            agent.v_tilde = critic_update(agent.v, delta, state, alpha_v, critic)
            if alpha_theta > 0.0:
                psi = policies[i].score(agent.theta, state, actions[i])
                agent.theta = actor_update(agent.theta, Delta, psi, alpha_theta, policies[i].theta_max)
            estimated += reward_model.evaluate(agent.lam, state, actions)

        weights = self.schedule.weights(t) if weights is None else weights
        transmitted = np.vstack([np.concatenate([rt.lam_tilde, rt.v_tilde]) for rt in runtimes])
        mixed = apply_consensus(transmitted, weights)
        for i, agent in enumerate(runtimes):
            agent.lam = mixed[i, :self._lam_size]
            agent.v = mixed[i, self._lam_size:]

        z_norms = np.linalg.norm(mixed, axis=1)
        max_z = float(z_norms.max())
        if not np.all(np.isfinite(z_norms)) or not all(np.all(np.isfinite(rt.theta)) for rt in runtimes):
            logger.error(f"Non-finite parameters at step {t}")
            raise DivergenceError("non-finite parameters", t)
        if max_z > self.divergence_cap:
            logger.error(f"Parameter norm {max_z:.3e} exceeds cap {self.divergence_cap:.3e} at step {t}")
            raise DivergenceError(f"||z|| = {max_z:.3e} exceeds the cap {self.divergence_cap:.3e}", t)

        next_actions = None if terminal else self.sample_actions(runtimes, s_next)
        return StepOutcome(s_next, next_actions, true_rewards, terminal, estimated / len(runtimes),
                           disagreement_norm(mixed), max_z)

    # -- episodes ------------------------------------------------------------

    def train(self, episodes: int, max_steps: int, init_scale: float = 1.0,
              runtimes: Optional[List[AgentRuntime]] = None) -> TrainingResult:
        """Run ``episodes`` episodes of at most ``max_steps`` steps; t continues across episodes."""
        runtimes = self.initialize(init_scale) if runtimes is None else runtimes
        initial = [rt.copy() for rt in runtimes]
        Z0 = np.vstack([rt.z for rt in runtimes])
        result = TrainingResult([], runtimes, initial, initial_disagreement=disagreement_norm(Z0),
                                final_disagreement=disagreement_norm(Z0),
                                max_z_norm=float(np.linalg.norm(Z0, axis=1).max()))
        cooperative = [i for i, rt in enumerate(runtimes) if rt.role is Role.COOPERATIVE] or list(range(len(runtimes)))
        t = 0
        for episode in range(episodes):
            state = self.env.reset(self.env_rng)
            actions = self.sample_actions(runtimes, state)
            returns = np.zeros(len(runtimes))
            discounted, estimated, discount = 0.0, 0.0, 1.0
            episode_max_z = 0.0
            trajectory = [state]
            outcome = None
            for k in range(max_steps):
                outcome = self.train_step(runtimes, state, actions, t)
                returns += outcome.rewards
                discounted += discount * float(outcome.rewards.mean())
                discount *= self.env.gamma
                estimated += outcome.estimated_reward
                episode_max_z = max(episode_max_z, outcome.max_z_norm)
                if self.record_step_metrics:
                    result.step_records.append(StepRecord(t, outcome.disagreement, outcome.max_z_norm))
                if self.record_trajectory:
                    trajectory.append(outcome.next_state)
                t += 1
                if outcome.terminal:
                    break
                state, actions = outcome.next_state, outcome.next_actions
            result.max_z_norm = max(result.max_z_norm, episode_max_z)
            result.final_disagreement = outcome.disagreement
            result.records.append(MetricsRecord(
                episode=episode, steps=k + 1, agent_returns=returns.copy(),
                team_return=float(returns.mean()), cooperative_return=float(returns[cooperative].mean()),
                discounted_team_return=discounted, estimated_team_return=estimated,
                disagreement=outcome.disagreement, max_z_norm=episode_max_z,
                theta_norm=max(float(np.linalg.norm(rt.theta)) for rt in runtimes),
                critic_norm=max(float(np.linalg.norm(rt.v)) for rt in runtimes),
                reward_norm=max(float(np.linalg.norm(rt.lam)) for rt in runtimes),
                terminal=outcome.terminal))
            if self.record_trajectory:
                result.trajectory = trajectory
            if (episode + 1) % max(1, episodes // 10) == 0:
                logger.info(f"Episode {episode + 1}/{episodes}: team return {returns.mean():.3f}, "
                            f"disagreement {outcome.disagreement:.3e}, t={t}")
        result.steps_taken = t
        return result


# ---------------------------------------------------------------------------
# Construction from a run configuration

def build_environment(config: RunConfig):
    env_config = config.environment
    adversary = config.attack.adversary if config.attack is not None else None
    if env_config.kind == "grid":
        return GridWorldEnvironment(GridWorldConfig(env_config.width, env_config.height, tuple(env_config.desired)),
                                    config.gamma)
    if env_config.kind == "small_mdp":
        seed = config.seed if env_config.mdp_seed is None else env_config.mdp_seed
        spec = SmallMdpSpec(env_config.num_states, tuple(env_config.action_sizes),
                            (env_config.reward_low, env_config.reward_high), env_config.concentration,
                            config.gamma, seed, adversary)
        return MdpEnvironment(generate_small_mdp(spec))
    mdp = load_mdp(env_config.path)
    roles = tuple(Role.ADVERSARY if i == adversary else Role.COOPERATIVE for i in range(mdp.num_agents))
    return MdpEnvironment(mdp.with_roles(roles))


def build_approximators(config: RunConfig, env) -> Approximators:
    approx = config.approximator
    sizes = env.action_sizes
    if approx.backend == "linear":
        if not env.tabular:
            raise ConfigurationError("the linear backend needs a finite-state environment; use backend 'mlp'")
        num_states = env.mdp.num_states
        num_actions = int(np.prod(sizes))
        if approx.features == "tabular":
            phi, F = build_tabular_features(num_states, num_actions)
        else:
            phi = build_radial_features(num_states, approx.radial_centers, approx.radial_width)
            F = StateActionFeatureMap(np.kron(phi.matrix, np.eye(num_actions)), (num_actions,))
        if approx.action_independent:
            F = StateActionFeatureMap.action_independent_from(phi, (num_actions,))
        policies = [LinearSoftmaxPolicy.from_state_features(phi.matrix, a, approx.theta_max) for a in sizes]
        return Approximators(LinearStateValue(phi), LinearRewardEstimate(F, sizes), policies)

    state_size = env.encode(env.reset(np.random.default_rng(0))).size
    eyes = [np.eye(a) for a in sizes]

    def encode_state_action(s, actions):
        if approx.action_independent:
            return env.encode(s)
        return np.concatenate([env.encode(s)] + [eyes[i][a] for i, a in enumerate(actions)])

    h1, h2 = approx.hidden_sizes
    reward_input = state_size if approx.action_independent else state_size + sum(sizes)
    critic = MlpStateValue(MlpApproximator((state_size, h1, h2, 1)), env.encode)
    reward = MlpRewardEstimate(MlpApproximator((reward_input, h1, h2, 1)), encode_state_action)
    policies = [MlpSoftmaxPolicy(MlpApproximator((state_size, h1, h2, a)), env.encode, approx.theta_max) for a in sizes]
    return Approximators(critic, reward, policies)


def build_schedule(config: RunConfig, num_agents: int) -> ConsensusSchedule:
    graph = config.graph
    adversary = config.attack.adversary if config.attack is not None and config.attack.omit_consensus else None
    if graph.schedule_path:
        schedule = load_schedule(graph.schedule_path, config.seed)
        if schedule.num_agents != num_agents:
            raise ConfigurationError(f"schedule file has {schedule.num_agents} agents, environment has {num_agents}")
        return ConsensusSchedule(schedule.graphs, adversary, graph.eta, schedule.kind,
                                 schedule.drop_probability, config.seed)
    if graph.schedule == "cycle":
        graphs = [CommGraph(num_agents, edges) for edges in graph.cycle_edges]
    elif graph.topology == "complete":
        graphs = [CommGraph.complete(num_agents)]
    elif graph.topology == "ring":
        graphs = [CommGraph.ring(num_agents)]
    else:
        graphs = [CommGraph(num_agents, graph.edges)]
    return ConsensusSchedule(graphs, adversary, graph.eta, graph.schedule, graph.drop_probability, config.seed)


def build_attack(config: RunConfig, env) -> Optional[AttackModel]:
    attack = config.attack
    if attack is None:
        return None
    table = None
    if attack.reward_transform == "table":
        if not env.tabular or attack.table_path is None:
            raise ConfigurationError("table reward transform needs a finite MDP and attack.table_path")
        target = load_mdp(attack.table_path)
        if target.transitions.shape != env.mdp.transitions.shape:
            raise ConfigurationError("target reward table does not match the environment's dimensions")
        table = target.rewards[0]
    transform = RewardTransform(attack.reward_transform, attack.scale, attack.shift, table)
    return AttackModel(attack.adversary, attack.omit_consensus, transform)


def build_trainer(config: RunConfig, env=None) -> ConsensusActorCritic:
    env = build_environment(config) if env is None else env
    check_attack_roster(config, env.num_agents)
    s = config.step_sizes
    steps = StepSizeSchedule(s.critic_scale, s.critic_exponent, s.actor_scale, s.actor_exponent, s.offset)
    if config.freeze_policy:
        steps = steps.frozen()
    return ConsensusActorCritic(env, build_approximators(config, env), build_schedule(config, env.num_agents), steps,
                                build_attack(config, env), config.seed, config.divergence_cap,
                                config.record_step_metrics, config.record_trajectory)


def freeze_policy_mode(config: RunConfig) -> RunConfig:
    """Same run with actor updates switched off (alpha_theta = 0)."""
    return config.model_copy(update={"freeze_policy": True})


def train(config: RunConfig) -> Tuple[ConsensusActorCritic, TrainingResult]:
    """Build everything the configuration names and train; deterministic in config.seed."""
    trainer = build_trainer(config)
    logger.info(f"Training '{config.name}' ({config.scenario}): {config.episodes} episodes x "
                f"<= {config.max_steps} steps, seed {config.seed}, frozen policy: {config.freeze_policy}")
    result = trainer.train(config.episodes, config.max_steps, config.approximator.init_scale)
    return trainer, result
