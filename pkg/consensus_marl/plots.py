"""Figures for finished runs: return comparisons and grid-world end states."""

import logging
import os
from typing import Optional, Sequence, Tuple

import matplotlib.pyplot as plt
import pandas as pd

from consensus_marl.metrics import agent_series

logger = logging.getLogger(__name__)


def plot_returns(data: pd.DataFrame, title: str = "Cumulative rewards per episode", save_path: Optional[str] = None):
    """
    One faint line per (scenario, agent) from long-format plot data, a dashed true
    team-average line per scenario and, when present, a dotted line for the
    cumulative estimated reward.
    """
    fig, ax = plt.subplots(figsize=(10, 5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    agents = agent_series(data)
    for k, scenario in enumerate(sorted(data["scenario"].unique())):
        color = colors[k % len(colors)]
        frame = data[data["scenario"] == scenario]
        for agent, series in agents[agents["scenario"] == scenario].groupby("agent"):
            ax.plot(series["episode"], series["return"], color=color, alpha=0.35, linewidth=1)
        team = frame[frame["agent"] == "team"]
        if team.empty:
            team = agents[agents["scenario"] == scenario].groupby("episode", as_index=False)["return"].mean()
        ax.plot(team["episode"], team["return"], color=color, linestyle="--", linewidth=2,
                label=f"{scenario} (team average)")
        estimated = frame[frame["agent"] == "estimated"]
        if not estimated.empty:
            ax.plot(estimated["episode"], estimated["return"], color=color, linestyle=":", linewidth=2,
                    label=f"{scenario} (estimated)")
    ax.set_title(title)
    ax.set_xlabel("Episode")
    ax.set_ylabel("Return")
    ax.legend()
    ax.grid(True)
    _save(fig, save_path)
    return fig


def plot_agent_returns(data: pd.DataFrame, scenario: str, adversary: Optional[int] = None,
                       save_path: Optional[str] = None):
    """Per-agent returns of one scenario, the adversary drawn in red."""
    fig, ax = plt.subplots(figsize=(10, 5))
    agents = agent_series(data)
    frame = agents[agents["scenario"] == scenario]
    for agent, series in frame.groupby("agent"):
        is_adversary = adversary is not None and agent == adversary
        ax.plot(series["episode"], series["return"], color="red" if is_adversary else "tab:blue",
                alpha=1.0 if is_adversary else 0.6, label=f"agent {agent}" + (" (adversary)" if is_adversary else ""))
    ax.set_title(f"True cumulative rewards per episode ({scenario})")
    ax.set_xlabel("Episode")
    ax.set_ylabel("Return")
    ax.legend()
    ax.grid(True)
    _save(fig, save_path)
    return fig


def plot_end_state(positions: Sequence[Tuple[int, int]], desired: Sequence[Tuple[int, int]], width: int,
                   height: int, adversary: Optional[int] = None, save_path: Optional[str] = None):
    """Agents' final cells (filled) against their desired cells (hollow); y grows downward."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, ((x, y), (xd, yd)) in enumerate(zip(positions, desired)):
        color = "red" if i == adversary else f"C{i % 10}"
        ax.scatter([xd], [yd], s=400, facecolors="none", edgecolors=color, linewidths=2)
        ax.scatter([x], [y], s=150, color=color, label=f"agent {i}" + (" (adversary)" if i == adversary else ""))
    ax.set_xlim(-0.5, width - 0.5)
    ax.set_ylim(height - 0.5, -0.5)
    ax.set_xticks(range(width))
    ax.set_yticks(range(height))
    ax.grid(True)
    ax.set_aspect("equal")
    ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0))
    ax.set_title("End state")
    _save(fig, save_path)
    return fig


def read_trajectory(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def final_positions(trajectory: pd.DataFrame) -> Tuple[Tuple[int, int], ...]:
    """Positions in the last row of a trajectory CSV (columns x_i, y_i)."""
    last = trajectory.iloc[-1]
    num_agents = sum(1 for c in trajectory.columns if c.startswith("x_"))
    return tuple((int(last[f"x_{i}"]), int(last[f"y_{i}"])) for i in range(num_agents))


def _save(fig, save_path: Optional[str]):
    if not save_path:
        return
    directory = os.path.dirname(save_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(save_path, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Saved figure to {save_path}")
