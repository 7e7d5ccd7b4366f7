"""
Demo script walking through the single-adversary attack without the Streamlit UI
This can be used to see the consensus capture and the hijacked fixed point on a small MDP
"""

import logging

import numpy as np

from consensus_marl.core.consensus import CommGraph, build_uniform_weights, linear_consensus_limit, spectral_condition
from consensus_marl.core.envs import SmallMdpSpec, generate_small_mdp
from consensus_marl.core.approximators import build_tabular_features
from consensus_marl.core.mdp import JointPolicy
from consensus_marl.core.oracle import FixedPointSystem, solve_critic_fixed_point, solve_reward_fixed_point


def demo_linear_consensus():
    """Scalar values mixed over a complete graph, with and without the adversary"""
    print("\n===== Linear Consensus Capture =====")
    values = np.array([4.0, -1.0, 2.5, 0.0, 7.0])
    graph = CommGraph.complete(len(values))

    for adversary in (None, 0):
        weights = build_uniform_weights(graph, adversary)
        limit = linear_consensus_limit(weights, values)
        label = "no adversary" if adversary is None else f"adversary = agent {adversary}"
        print(f"\n{label}")
        print(f"Initial values:  {values}")
        print(f"Consensus value: {limit}")
        print(f"Spectral condition: {spectral_condition(weights):.4f}")


def demo_hijacked_fixed_point():
    """Exact fixed points of the attacked and adversary-free networks at the uniform policy"""
    print("\n===== Fixed Point Under Attack =====")
    mdp = generate_small_mdp(SmallMdpSpec(4, (2, 2, 2), reward_range=(0.0, 5.0), gamma=0.5, seed=7, adversary=1))
    phi, F = build_tabular_features(mdp.num_states, mdp.num_joint_actions)
    policy = JointPolicy.uniform(mdp.num_states, mdp.action_sizes)

    attacked = FixedPointSystem.from_mdp(mdp, policy, phi, F, "adversary").validate()
    team = attacked.retarget("team")
    for name, system in (("adversary's objective", attacked), ("team objective", team)):
        v = solve_critic_fixed_point(system)
        lam = solve_reward_fixed_point(system)
        print(f"\nTarget: {name}")
        print(f"Critic fixed point v:     {np.round(v, 4)}")
        print(f"Mean estimated reward:    {lam.mean():.4f}")

    gap = np.max(np.abs(solve_reward_fixed_point(attacked) - solve_reward_fixed_point(team)))
    print(f"\nLargest reward-estimate gap between the two fixed points: {gap:.4f}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    demo_linear_consensus()
    demo_hijacked_fixed_point()
