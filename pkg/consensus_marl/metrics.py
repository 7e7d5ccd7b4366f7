"""
Per-episode metrics and their CSV contract.

The metrics CSV starts with one comment line naming the schema version and the column
order; the column set depends only on the number of agents.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from consensus_marl.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "consensus-marl-metrics/v1"
PLOT_SCHEMA_VERSION = "consensus-marl-plot-data/v1"
FLOAT_FORMAT = "%.12g"


@dataclass
class MetricsRecord:
    """
    Observables of one training episode.

    Returns are undiscounted sums of true environment rewards; the discounted team
    return is recorded alongside. The estimated return sums the agents' mean
    reward-estimator output along the trajectory.
    """
    episode: int
    steps: int
    agent_returns: np.ndarray
    team_return: float
    cooperative_return: float
    discounted_team_return: float
    estimated_team_return: float
    disagreement: float
    max_z_norm: float
    theta_norm: float
    critic_norm: float
    reward_norm: float
    terminal: bool


@dataclass
class StepRecord:
    t: int
    disagreement: float
    max_z_norm: float


def metrics_columns(num_agents: int) -> List[str]:
    return (["scenario", "seed", "episode", "steps"]
            + [f"return_agent_{i}" for i in range(num_agents)]
            + ["team_return", "cooperative_return", "discounted_team_return", "estimated_team_return",
               "disagreement", "max_z_norm", "theta_norm", "critic_norm", "reward_norm", "terminal"])


def metrics_frame(records: Sequence[MetricsRecord], num_agents: int, scenario: str, seed: int) -> pd.DataFrame:
    rows = []
    for rec in records:
        row = {"scenario": scenario, "seed": seed, "episode": rec.episode, "steps": rec.steps}
        row.update({f"return_agent_{i}": float(r) for i, r in enumerate(rec.agent_returns)})
        row.update(team_return=rec.team_return, cooperative_return=rec.cooperative_return,
                   discounted_team_return=rec.discounted_team_return,
                   estimated_team_return=rec.estimated_team_return, disagreement=rec.disagreement,
                   max_z_norm=rec.max_z_norm, theta_norm=rec.theta_norm, critic_norm=rec.critic_norm,
                   reward_norm=rec.reward_norm, terminal=int(rec.terminal))
        rows.append(row)
    return pd.DataFrame(rows, columns=metrics_columns(num_agents))


def write_metrics_csv(records: Sequence[MetricsRecord], num_agents: int, path: str,
                      scenario: str, seed: int) -> pd.DataFrame:
    """Write the versioned metrics CSV; zero records give a header-only file."""
    frame = metrics_frame(records, num_agents, scenario, seed)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(f"# {SCHEMA_VERSION} columns={','.join(frame.columns)}\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} metrics rows to {path}")
    return frame


def write_step_csv(steps: Sequence[StepRecord], path: str):
    frame = pd.DataFrame([vars(s) for s in steps], columns=["t", "disagreement", "max_z_norm"])
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_metrics_csv(path: str) -> pd.DataFrame:
    try:
        with open(path) as handle:
            header = handle.readline()
        if not header.startswith(f"# {SCHEMA_VERSION}"):
            raise ConfigurationError(f"'{path}' is not a {SCHEMA_VERSION} metrics file")
        return pd.read_csv(path, comment="#")
    except OSError as e:
        raise ConfigurationError(f"could not read metrics file '{path}': {e}") from e


SUMMARY_SERIES = {"team": "team_return", "estimated": "estimated_team_return"}


def plot_data(frames: Sequence[pd.DataFrame], window: int = 1, team_series: bool = True) -> pd.DataFrame:
    """
    Long-format (episode, scenario, agent, return) rows, one per agent per episode.

    Agents are labelled by their index. With ``team_series`` each scenario also gets
    a "team" series (true team-average return) and an "estimated" series (summed
    reward-estimator outputs) when its metrics carry them. Returns are smoothed with
    a trailing moving average of ``window`` episodes per (scenario, agent) series;
    window 1 leaves them unchanged.
    """
    if window < 1:
        raise ConfigurationError(f"smoothing window must be >= 1, got {window}")
    seen: Dict[str, int] = {}
    parts = []
    for frame in frames:
        columns = {c.replace("return_agent_", ""): c for c in frame.columns if c.startswith("return_agent_")}
        columns = dict(sorted(columns.items(), key=lambda item: int(item[0])))
        if team_series:
            columns.update({name: c for name, c in SUMMARY_SERIES.items() if c in frame.columns})
        base = str(frame["scenario"].iloc[0]) if len(frame) else "empty"
        seen[base] = seen.get(base, 0) + 1
        label = base if seen[base] == 1 else f"{base}#{seen[base]}"
        long = (frame.rename(columns={c: name for name, c in columns.items()})
                .melt(id_vars=["episode"], value_vars=list(columns), var_name="agent", value_name="return"))
        long["agent"] = long["agent"].astype(str)
        long.insert(1, "scenario", label)
        parts.append(long)
    if not parts:
        return pd.DataFrame(columns=["episode", "scenario", "agent", "return"])
    # melt keeps series in column order, so a stable sort on scenario alone preserves agent order
    data = pd.concat(parts, ignore_index=True).sort_values("scenario", kind="stable")
    if window > 1:
        data["return"] = (data.groupby(["scenario", "agent"], sort=False)["return"]
                          .transform(lambda series: series.rolling(window, min_periods=1).mean()))
    return data.reset_index(drop=True)[["episode", "scenario", "agent", "return"]]


def agent_series(data: pd.DataFrame) -> pd.DataFrame:
    """Rows of real agents only, with the agent column as integers."""
    rows = data[~data["agent"].astype(str).isin(list(SUMMARY_SERIES))].copy()
    rows["agent"] = rows["agent"].astype(int)
    return rows


def write_plot_data(data: pd.DataFrame, path: str, window: int):
    with open(path, "w", newline="") as handle:
        handle.write(f"# {PLOT_SCHEMA_VERSION} smoothing_window={window}\n")
        data.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(data)} plot-data rows to {path}")


def tail_mean(frame: pd.DataFrame, column: str, fraction: float = 0.1) -> float:
    """Mean of ``column`` over the last ``fraction`` of episodes (at least one)."""
    count = max(1, int(round(len(frame) * fraction)))
    return float(frame[column].iloc[-count:].mean())


def write_trajectory_csv(trajectory: Sequence, path: str) -> pd.DataFrame:
    """One row per visited state: grid positions as x_i, y_i columns, MDP states as 'state'."""
    rows = []
    for step, state in enumerate(trajectory):
        if isinstance(state, tuple):
            row = {"step": step}
            for i, (x, y) in enumerate(state):
                row.update({f"x_{i}": x, f"y_{i}": y})
        else:
            row = {"step": step, "state": int(state)}
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} trajectory rows to {path}")
    return frame
