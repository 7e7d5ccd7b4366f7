import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import the top-level application modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from consensus_marl.core.envs import SmallMdpSpec, generate_small_mdp
from consensus_marl.core.mdp import NetworkedMdp


@pytest.fixture
def small_mdp():
    """|S|=4, three agents with two actions each, agent 1 adversarial."""
    return generate_small_mdp(SmallMdpSpec(4, (2, 2, 2), reward_range=(0.0, 5.0), gamma=0.5, seed=7, adversary=1))


@pytest.fixture
def clean_small_mdp():
    return generate_small_mdp(SmallMdpSpec(4, (2, 2, 2), reward_range=(0.0, 5.0), gamma=0.5, seed=7))


@pytest.fixture
def two_state_mdp():
    """Two states, two agents with two actions; deterministic moves to s' = a^0."""
    P = np.zeros((2, 4, 2))
    for s in range(2):
        for a in range(4):
            P[s, a, a // 2] = 1.0
    R = np.zeros((2, 2, 4, 2))
    R[0, :, :, 1] = 1.0
    R[1, :, :, 0] = 2.0
    return NetworkedMdp(P, R, (2, 2), 0.9)
