import os
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from consensus_marl.config import RunConfig, load_config, resolve_output_path, with_overrides
from consensus_marl.core.algorithm import ConsensusActorCritic, TrainingResult, freeze_policy_mode, train
from consensus_marl.core.approximators import save_arrays
from consensus_marl.core.consensus import (
    CheckResult,
    CommGraph,
    ConsensusWeights,
    check_weights,
    load_schedule,
    load_weights_text,
)
from consensus_marl.core.errors import ConfigurationError
from consensus_marl.core.oracle import FixedPointSystem, VerificationReport, policy_from_parameters, verify_theorem1
from consensus_marl.plots import plot_returns
from consensus_marl.metrics import (
    metrics_frame,
    plot_data,
    read_metrics_csv,
    write_metrics_csv,
    write_plot_data,
    write_step_csv,
    write_trajectory_csv,
)

# Load the environment variables from .env file
load_dotenv()

# Set up the logging configuration
logging.basicConfig(level=os.getenv("CONSENSUS_MARL_LOG_LEVEL", "INFO").upper(),
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


@dataclass
class RunSummary:
    config: RunConfig
    metrics: pd.DataFrame
    metrics_path: Optional[str]
    result: TrainingResult
    trainer: ConsensusActorCritic


@dataclass
class ConsensusReport:
    source: str
    checks: List[CheckResult]
    strongly_connected: Optional[bool]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = [f"consensus check: {self.source}"]
        for check in self.checks:
            lines.append(f"{check.name}: {'PASS' if check.passed else 'FAIL'} ({check.detail})")
        if self.strongly_connected is not None:
            lines.append(f"strongly_connected: {self.strongly_connected}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


class ExperimentRunner:
    """
    Runs seeded consensus actor-critic experiments and their checks.

    This class provides:
    - Scenario runs (clean or attacked) with metrics CSV output
    - Frozen-policy fixed-point verification on small MDPs
    - Consensus matrix and schedule certification
    - Plot data for comparing paired runs
    """

    def __init__(self, output_dir: Optional[str] = None):
        """
        Args:
            output_dir: directory for relative output paths; defaults to
                CONSENSUS_MARL_OUTPUT_DIR when set
        """
        self.output_dir = output_dir or os.getenv("CONSENSUS_MARL_OUTPUT_DIR")
        logger.info(f"ExperimentRunner initialized (output directory: {self.output_dir or 'current directory'})")

    def resolve(self, path: Optional[str]) -> Optional[str]:
        return resolve_output_path(path, self.output_dir)

    def load(self, config_path: str, **overrides) -> RunConfig:
        config = load_config(config_path)
        return with_overrides(config, **overrides)

    def run_scenario(self, config_path: str, seed: Optional[int] = None, out: Optional[str] = None,
                     episodes: Optional[int] = None, freeze_policy: Optional[bool] = None,
                     trajectory_path: Optional[str] = None) -> RunSummary:
        """
        Train one scenario and write its metrics.

        Args:
            config_path: run configuration JSON
            seed, episodes: override the configured values
            out: metrics CSV path (overrides output.metrics_path)
            freeze_policy: switch actor updates off
            trajectory_path: write the final episode's states here

        Returns:
            RunSummary with the metrics frame and the final parameters

        Raises:
            ConfigurationError: invalid configuration or violated assumption
            DivergenceError: parameters blew up during training
        """
        config = self.load(config_path, seed=seed, episodes=episodes, metrics_path=out,
                           trajectory_path=trajectory_path, freeze_policy=freeze_policy or None)
        if config.output.trajectory_path and not config.record_trajectory:
            config = config.model_copy(update={"record_trajectory": True})
        trainer, result = train(config)
        num_agents = trainer.env.num_agents

        metrics_path = self.resolve(config.output.metrics_path)
        if metrics_path:
            frame = write_metrics_csv(result.records, num_agents, metrics_path, config.scenario, config.seed)
        else:
            frame = metrics_frame(result.records, num_agents, config.scenario, config.seed)
        if config.record_step_metrics and metrics_path:
            write_step_csv(result.step_records, os.path.splitext(metrics_path)[0] + "_steps.csv")
        parameters_path = self.resolve(config.output.parameters_path)
        if parameters_path:
            arrays = {}
            for rt in result.runtimes:
                arrays.update({f"theta_{rt.agent_id}": rt.theta, f"v_{rt.agent_id}": rt.v,
                               f"lambda_{rt.agent_id}": rt.lam})
            save_arrays(parameters_path, arrays)
            logger.info(f"Saved final parameters to {parameters_path}")
        trajectory_out = self.resolve(config.output.trajectory_path)
        if trajectory_out:
            write_trajectory_csv(result.trajectory, trajectory_out)
        logger.info(f"Finished '{config.name}': {len(result.records)} episodes, {result.steps_taken} steps, "
                    f"max ||z|| {result.max_z_norm:.4g}")
        return RunSummary(config, frame, metrics_path, result, trainer)

    def fixed_point_system(self, trainer: ConsensusActorCritic, result: TrainingResult) -> FixedPointSystem:
        """Oracle system matching a finished linear run: the network's target reward at the final policy."""
        env = trainer.env
        if not env.tabular or not hasattr(trainer.models.critic, "features"):
            raise ConfigurationError("fixed-point verification needs a small MDP with the linear backend")
        policy = policy_from_parameters(trainer.models.policies, [rt.theta for rt in result.runtimes],
                                        env.mdp.num_states)
        attack = trainer.attack
        target, rewards = "team", None
        if attack is not None:
            compromised = attack.reward_transform.tabulate(env.mdp.rewards[attack.adversary])
            if attack.omit_consensus:
                target, rewards = "adversary", compromised
            else:
                team = env.mdp.rewards.copy()
                team[attack.adversary] = compromised
                rewards = team.mean(axis=0)
        return FixedPointSystem.from_mdp(env.mdp, policy, trainer.models.critic.features,
                                         trainer.models.reward.features, target, rewards).validate()

    def verify_fixed_point(self, config_path: str, seed: Optional[int] = None, tolerance: Optional[float] = None,
                           out: Optional[str] = None, episodes: Optional[int] = None) -> VerificationReport:
        """
        Frozen-policy run followed by the oracle comparison.

        The report is written to ``out`` (text) and next to it as CSV when given.
        """
        config = freeze_policy_mode(self.load(config_path, seed=seed, episodes=episodes, tolerance=tolerance))
        trainer, result = train(config)
        system = self.fixed_point_system(trainer, result)
        report = verify_theorem1(result.runtimes, system, config.tolerance, trainer.models.policies)
        report_path = self.resolve(out or config.output.report_path)
        if report_path:
            report.write(report_path, os.path.splitext(report_path)[0] + ".csv")
        return report

    def consensus_check(self, path: str, adversary: Optional[int] = None, eta: Optional[float] = None,
                        seed: int = 0) -> ConsensusReport:
        """
        Certify a dense matrix text file or a JSON graph schedule.

        Structural checks run on every matrix of a schedule (one period, or the
        first sampled step of a random schedule); the spectral condition on the
        schedule's expectation.
        """
        if path.endswith(".json"):
            schedule = load_schedule(path, seed)
            steps = schedule.period if schedule.kind != "random_drop" else 1
            checks = []
            for t in range(steps):
                for check in check_weights(schedule.weights(t), include_spectral=False):
                    checks.append(CheckResult(f"{check.name}[t={t}]" if steps > 1 else check.name,
                                              check.passed, check.detail))
            rho = schedule.spectral_condition()
            checks.append(CheckResult("spectral_condition", bool(rho < 1.0), f"spectral norm {rho:.12g}"))
            connected = all(g.is_strongly_connected() for g in schedule.graphs)
            return ConsensusReport(path, checks, connected)
        weights = load_weights_text(path, eta)
        if adversary is not None:
            weights = ConsensusWeights(weights.matrix, weights.eta, frozenset({adversary}))
        edges = [(i, j) for i, j in zip(*np.nonzero(weights.matrix)) if i != j]
        connected = CommGraph(weights.num_agents, edges).is_strongly_connected()
        return ConsensusReport(path, check_weights(weights), connected)

    def emit_plot_data(self, metrics_paths: Sequence[str], out: str, window: int = 1,
                       figure: Optional[str] = None) -> pd.DataFrame:
        """Merge metrics files into long-format (episode, scenario, agent, return) rows."""
        frames = [read_metrics_csv(p if os.path.exists(p) else self.resolve(p)) for p in metrics_paths]
        data = plot_data(frames, window)
        out = self.resolve(out)
        write_plot_data(data, out, window)
        if figure:
            plot_returns(data, save_path=self.resolve(figure))
        return data


if __name__ == "__main__":
    import sys
    runner = ExperimentRunner()
    summary = runner.run_scenario(sys.argv[1] if len(sys.argv) > 1 else "configs/small_mdp_attacked.json")
    print(summary.metrics.tail())
