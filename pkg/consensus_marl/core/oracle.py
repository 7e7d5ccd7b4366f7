"""
Exact fixed points of the critic and reward-estimator recursions at a fixed policy.

Everything here is computed from the MDP itself (stationary distribution, averaged
rewards, induced chain) and never from training code, so it can serve as ground
truth for frozen-policy runs on small MDPs.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.sparse.linalg import gmres

from consensus_marl.core.approximators import MAX_TABULAR_SIZE, StateActionFeatureMap, StateFeatureMap
from consensus_marl.core.errors import ConfigurationError, ConvergenceError, RankError, ScaleError
from consensus_marl.core.mdp import (
    JointPolicy,
    NetworkedMdp,
    Role,
    decode_joint_action,
    reward_summaries,
    stationary_distribution,
    transition_matrix_under_policy,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
RELATIVE_EPS = 1e-12
SINGULAR_TOL = 1e-12


@dataclass
class FixedPointSystem:
    """
    Linear system whose solution the consensus iterates track at a fixed policy.

    Attributes:
        mdp: the networked MDP
        policy: the frozen joint policy
        state_features: Phi
        reward_features: F
        d: stationary distribution d_theta
        P_theta: induced state chain
        D_s: diag(d_theta(s))
        D_sa: diag(d_theta(s) pi(a|s))
        R_sa: target averaged reward over state-action pairs
        R_s: target averaged reward over states under the policy
        target: "adversary", "team" or "agent <i>"
    """
    mdp: NetworkedMdp
    policy: JointPolicy
    state_features: StateFeatureMap
    reward_features: StateActionFeatureMap
    d: np.ndarray
    P_theta: np.ndarray
    D_s: np.ndarray
    D_sa: np.ndarray
    R_sa: np.ndarray
    R_s: np.ndarray
    target: str

    @classmethod
    def from_mdp(cls, mdp: NetworkedMdp, policy: JointPolicy, state_features: StateFeatureMap,
                 reward_features: StateActionFeatureMap, target: Optional[str] = None,
                 target_rewards: Optional[np.ndarray] = None) -> "FixedPointSystem":
        """
        Assemble the system for one target reward.

        The default target is the adversary's reward when the MDP names one and the
        team average otherwise. ``target_rewards`` (shape |S| x |A| x |S|) replaces
        the target's r(s, a, s'), e.g. by the adversary's compromised reward.

        Raises:
            ScaleError: if |S| |A| is too large for exact enumeration
        """
        num_pairs = mdp.num_states * mdp.num_joint_actions
        if num_pairs > MAX_TABULAR_SIZE:
            raise ScaleError(f"|S||A| = {num_pairs} exceeds the exact-enumeration limit {MAX_TABULAR_SIZE}")
        if state_features.matrix.shape[0] != mdp.num_states:
            raise ConfigurationError(f"Phi has {state_features.matrix.shape[0]} rows for {mdp.num_states} states")
        if reward_features.matrix.shape[0] != num_pairs:
            raise ConfigurationError(f"F has {reward_features.matrix.shape[0]} rows for {num_pairs} state-action pairs")
        if target is None:
            target = "adversary" if mdp.adversary is not None else "team"

        P_theta = transition_matrix_under_policy(mdp, policy)
        d = stationary_distribution(P_theta)
        pi = policy.joint()
        if target_rewards is not None:
            override = np.asarray(target_rewards, dtype=float)
            if override.shape != mdp.transitions.shape:
                raise ConfigurationError(f"target rewards of shape {override.shape}, expected {mdp.transitions.shape}")
            r_sa = np.einsum("sat,sat->sa", mdp.transitions, override)
            R_sa, R_s = r_sa.reshape(-1), np.einsum("sa,sa->s", pi, r_sa)
        else:
            summary = reward_summaries(mdp, policy)
            if target == "team":
                R_sa, R_s = summary.team_state_action, summary.team_state
            else:
                agent = _target_agent(mdp, target)
                R_sa, R_s = summary.state_action[agent], summary.state[agent]
        return cls(mdp, policy, state_features, reward_features, d, P_theta, np.diag(d),
                   np.diag((d[:, None] * pi).reshape(-1)), R_sa, R_s, target)

    def retarget(self, target: str) -> "FixedPointSystem":
        return FixedPointSystem.from_mdp(self.mdp, self.policy, self.state_features, self.reward_features, target)

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    @property
    def Phi(self) -> np.ndarray:
        return self.state_features.matrix

    @property
    def F(self) -> np.ndarray:
        return self.reward_features.matrix

    def reward_normal_matrix(self) -> np.ndarray:
        return self.F.T @ self.D_sa @ self.F

    def critic_matrix(self) -> np.ndarray:
        """Phi^T D_s (I - gamma P_theta) Phi."""
        n = self.mdp.num_states
        return self.Phi.T @ self.D_s @ (np.eye(n) - self.gamma * self.P_theta) @ self.Phi

    @property
    def A_prime(self) -> np.ndarray:
        """blockdiag(-F^T D_sa F, Phi^T D_s (gamma P_theta - I) Phi)."""
        return linalg.block_diag(-self.reward_normal_matrix(), -self.critic_matrix())

    @property
    def b_bar(self) -> np.ndarray:
        return np.concatenate([self.F.T @ self.D_sa @ self.R_sa, self.Phi.T @ self.D_s @ self.R_s])

    def validate(self) -> "FixedPointSystem":
        """Check the distribution matrices and the stability of the critic block."""
        for name, D in (("D_s", self.D_s), ("D_sa", self.D_sa)):
            diagonal = np.diag(D)
            if not np.array_equal(D, np.diag(diagonal)) or np.any(diagonal < 0):
                raise ConfigurationError(f"{name} is not a nonnegative diagonal matrix")
            if abs(diagonal.sum() - 1.0) > 1e-10:
                raise ConfigurationError(f"trace of {name} is {diagonal.sum():.15g}, expected 1")
        eigenvalues = linalg.eigvals(-self.critic_matrix())
        if np.any(eigenvalues.real >= 0.0):
            raise RankError(f"critic block has eigenvalues with nonnegative real part: {eigenvalues}")
        return self


def _target_agent(mdp: NetworkedMdp, target: str) -> int:
    if target == "adversary":
        if mdp.adversary is None:
            raise ConfigurationError("target 'adversary' but the MDP has no adversary")
        return mdp.adversary
    if target.startswith("agent "):
        agent = int(target.split()[1])
        if 0 <= agent < mdp.num_agents:
            return agent
    raise ConfigurationError(f"unknown fixed-point target '{target}'")


def _solve(matrix: np.ndarray, rhs: np.ndarray, method: str, initial: Optional[np.ndarray], name: str) -> np.ndarray:
    singular = linalg.svdvals(matrix)
    if singular.size == 0 or singular[-1] <= SINGULAR_TOL * max(singular[0], 1.0):
        raise RankError(f"{name} system is singular (smallest singular value {singular[-1] if singular.size else 0.0:.3e})")
    if method == "direct":
        solution = linalg.solve(matrix, rhs)
    elif method == "iterative":
        x0 = np.zeros_like(rhs) if initial is None else np.asarray(initial, dtype=float)
        solution, info = gmres(matrix, rhs, x0=x0, rtol=1e-14, atol=1e-15, restart=matrix.shape[0], maxiter=50)
        if info != 0:
            raise ConvergenceError(f"iterative {name} solve did not converge (info={info})",
                                   float(np.linalg.norm(matrix @ solution - rhs)))
    else:
        raise ConfigurationError(f"unknown solve method '{method}'")
    residual = float(np.max(np.abs(matrix @ solution - rhs))) if rhs.size else 0.0
    if residual > RESIDUAL_TOL * max(1.0, float(np.max(np.abs(rhs)))):
        raise ConvergenceError(f"{name} fixed point residual {residual:.3e} exceeds {RESIDUAL_TOL}", residual)
    return solution


def solve_reward_fixed_point(system: FixedPointSystem, method: str = "direct",
                             initial: Optional[np.ndarray] = None) -> np.ndarray:
    """lambda_theta = (F^T D_sa F)^{-1} F^T D_sa R, the weighted least-squares reward fit."""
    rhs = system.F.T @ system.D_sa @ system.R_sa
    return _solve(system.reward_normal_matrix(), rhs, method, initial, "reward")


def solve_critic_fixed_point(system: FixedPointSystem, method: str = "direct",
                             initial: Optional[np.ndarray] = None) -> np.ndarray:
    """v_theta = [Phi^T D_s (I - gamma P_theta) Phi]^{-1} Phi^T D_s R_theta, the TD(0) fixed point."""
    rhs = system.Phi.T @ system.D_s @ system.R_s
    return _solve(system.critic_matrix(), rhs, method, initial, "critic")


def baseline_fixed_point(system: FixedPointSystem, method: str = "direct") -> Tuple[np.ndarray, np.ndarray]:
    """Fixed point of an adversary-free network: the same solves against team-average rewards."""
    team = system if system.target == "team" else system.retarget("team")
    return solve_reward_fixed_point(team, method), solve_critic_fixed_point(team, method)


def relative_error(x: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x) - reference) / max(float(np.linalg.norm(reference)), RELATIVE_EPS))


# ---------------------------------------------------------------------------
# Actor stationarity

def policy_from_parameters(policies: Sequence, thetas: Sequence[np.ndarray], num_states: int) -> JointPolicy:
    """Tabulate every agent's policy pi^i(.|s; theta^i) over the state space."""
    return JointPolicy(tuple(np.vstack([policy.probs(theta, s) for s in range(num_states)])
                             for policy, theta in zip(policies, thetas)))


def estimated_advantage(system: FixedPointSystem, lam: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Delta(s, a) = f(s,a)^T lambda + gamma E_s'[phi(s')^T v] - phi(s)^T v, shape (|S|, |A|)."""
    mdp = system.mdp
    V = system.Phi @ v
    r_bar = (system.F @ lam).reshape(mdp.num_states, mdp.num_joint_actions)
    return r_bar + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions, V) - V[:, None]


def actor_drift(system: FixedPointSystem, policies: Sequence, thetas: Sequence[np.ndarray],
                lam: np.ndarray, v: np.ndarray) -> List[np.ndarray]:
    """Exact E_{s~d, a~pi}[Delta(s, a) psi^i(s, a^i)] for every agent."""
    mdp = system.mdp
    weights = system.d[:, None] * system.policy.joint() * estimated_advantage(system, lam, v)
    decoded = [decode_joint_action(a, mdp.action_sizes) for a in range(mdp.num_joint_actions)]
    drifts = []
    for i, (policy, theta) in enumerate(zip(policies, thetas)):
        drift = np.zeros_like(np.asarray(theta, dtype=float))
        for s in range(mdp.num_states):
            per_action = np.zeros(mdp.action_sizes[i])
            for a, local in enumerate(decoded):
                per_action[local[i]] += weights[s, a]
            for a_i, weight in enumerate(per_action):
                if weight != 0.0:
                    drift += weight * policy.score(theta, s, a_i)
        drifts.append(drift)
    return drifts


def actor_stationarity_residual(system: FixedPointSystem, policies: Sequence, thetas: Sequence[np.ndarray],
                                lam: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-agent sup-norm of the actor drift; zero at a stationary point of the projected ascent."""
    return np.array([float(np.max(np.abs(drift))) if drift.size else 0.0
                     for drift in actor_drift(system, policies, thetas, lam, v)])


def is_interior(theta: np.ndarray, theta_max: float) -> bool:
    return bool(np.all(np.abs(theta) < theta_max))


# ---------------------------------------------------------------------------
# Verification report

@dataclass
class AgentCheck:
    agent: int
    role: str
    v_rel_error: float
    lambda_rel_error: float
    passed: bool
    actor_residual: float = float("nan")
    interior: bool = True


@dataclass
class VerificationReport:
    target: str
    tolerance: float
    agents: List[AgentCheck]
    baseline_gap: float

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.agents)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(a) for a in self.agents],
                            columns=["agent", "role", "v_rel_error", "lambda_rel_error", "actor_residual",
                                     "interior", "passed"])

    def to_text(self) -> str:
        lines = [f"fixed-point verification: target={self.target} tolerance={self.tolerance:g}",
                 f"attacked-vs-baseline reward fixed point gap: {self.baseline_gap:.6g}"]
        for a in self.agents:
            lines.append(f"agent {a.agent} ({a.role}): v_rel_error={a.v_rel_error:.6g} "
                         f"lambda_rel_error={a.lambda_rel_error:.6g} actor_residual={a.actor_residual:.6g} "
                         f"interior={a.interior} {'PASS' if a.passed else 'FAIL'}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, text_path: str, csv_path: Optional[str] = None):
        with open(text_path, "w") as handle:
            handle.write(self.to_text())
        if csv_path:
            self.to_frame().to_csv(csv_path, index=False, float_format="%.12g", lineterminator="\n")
        logger.info(f"Wrote verification report to {text_path}")


def verify_theorem1(runtimes: Sequence, system: FixedPointSystem, tolerance: float,
                    policies: Optional[Sequence] = None) -> VerificationReport:
    """
    Compare every agent's (v, lambda) with the fixed point of ``system``.

    ``runtimes`` are AgentRuntime objects (or anything with v, lam, theta and role).
    When ``policies`` are given each agent's actor stationarity residual at the
    exact (lambda_theta, v_theta) is reported alongside, with whether the final
    thetas lie inside the projection box; neither affects pass/fail.
    """
    lam_star = solve_reward_fixed_point(system)
    v_star = solve_critic_fixed_point(system)
    lam_team, _ = baseline_fixed_point(system)
    thetas = [rt.theta for rt in runtimes]
    residuals, interior = None, True
    if policies is not None:
        residuals = actor_stationarity_residual(system, policies, thetas, lam_star, v_star)
        interior = all(is_interior(theta, p.theta_max) for p, theta in zip(policies, thetas))
    checks = []
    for k, rt in enumerate(runtimes):
        v_err = relative_error(rt.v, v_star)
        lam_err = relative_error(rt.lam, lam_star)
        role = rt.role.value if isinstance(rt.role, Role) else str(rt.role)
        check = AgentCheck(rt.agent_id, role, v_err, lam_err, bool(v_err <= tolerance and lam_err <= tolerance))
        if residuals is not None:
            check.actor_residual = float(residuals[k])
            check.interior = interior
        checks.append(check)
    report = VerificationReport(system.target, tolerance, checks, float(np.linalg.norm(lam_star - lam_team)))
    logger.info(f"Fixed-point verification against '{system.target}': {'PASS' if report.passed else 'FAIL'}")
    return report
