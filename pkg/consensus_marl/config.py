"""
Run configuration models.

A run configuration is a JSON document validated into RunConfig. Relative output
paths are resolved against CONSENSUS_MARL_OUTPUT_DIR when it is set.
"""

import json
import logging
import os
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from consensus_marl.core.errors import AssumptionViolation, ConfigurationError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "CONSENSUS_MARL_OUTPUT_DIR"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridEnvConfig(_Model):
    kind: Literal["grid"] = "grid"
    width: int = 4
    height: int = 4
    desired: List[Tuple[int, int]] = [(0, 0), (3, 3), (3, 0)]

    @property
    def num_agents(self) -> int:
        return len(self.desired)


class SmallMdpEnvConfig(_Model):
    kind: Literal["small_mdp"] = "small_mdp"
    num_states: int = 4
    action_sizes: List[int] = [2, 2, 2]
    reward_low: float = 0.0
    reward_high: float = 5.0
    concentration: float = 1.0
    mdp_seed: Optional[int] = None

    @property
    def num_agents(self) -> int:
        return len(self.action_sizes)


class MdpFileEnvConfig(_Model):
    kind: Literal["mdp_file"] = "mdp_file"
    path: str


EnvironmentConfig = Annotated[Union[GridEnvConfig, SmallMdpEnvConfig, MdpFileEnvConfig], Field(discriminator="kind")]


class ApproximatorConfig(_Model):
    backend: Literal["linear", "mlp"] = "linear"
    features: Literal["tabular", "radial"] = "tabular"
    radial_centers: int = 3
    radial_width: float = 0.3
    hidden_sizes: Tuple[int, int] = (64, 64)
    action_independent: bool = False
    theta_max: float = 50.0
    init_scale: float = 1.0


class StepSizeConfig(_Model):
    critic_scale: float = 1.0
    critic_exponent: float = 0.65
    actor_scale: float = 1.0
    actor_exponent: float = 0.85
    offset: float = 1.0


class GraphConfig(_Model):
    topology: Literal["complete", "ring", "edges"] = "complete"
    edges: List[Tuple[int, int]] = []
    schedule: Literal["static", "cycle", "random_drop"] = "static"
    cycle_edges: List[List[Tuple[int, int]]] = []
    drop_probability: float = 0.0
    eta: Optional[float] = None
    schedule_path: Optional[str] = None


class AttackConfig(_Model):
    adversary: int = 0
    omit_consensus: bool = True
    reward_transform: Literal["identity", "affine", "table"] = "identity"
    scale: float = 1.0
    shift: float = 0.0
    table_path: Optional[str] = None


class OutputConfig(_Model):
    metrics_path: Optional[str] = None
    parameters_path: Optional[str] = None
    trajectory_path: Optional[str] = None
    report_path: Optional[str] = None


class RunConfig(_Model):
    """Complete description of one seeded run."""
    name: str = "run"
    scenario: Literal["clean", "attacked"] = "clean"
    environment: EnvironmentConfig = SmallMdpEnvConfig()
    gamma: float = 0.9
    episodes: int = 200
    max_steps: int = 1000
    seed: int = 0
    approximator: ApproximatorConfig = ApproximatorConfig()
    step_sizes: StepSizeConfig = StepSizeConfig()
    graph: GraphConfig = GraphConfig()
    attack: Optional[AttackConfig] = None
    freeze_policy: bool = False
    record_step_metrics: bool = False
    record_trajectory: bool = False
    divergence_cap: float = 1e6
    tolerance: float = 0.05
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def _check_scenario(self):
        if self.scenario == "attacked" and self.attack is None:
            raise ValueError("attacked scenarios must name exactly one adversary in 'attack'")
        if self.scenario == "clean" and self.attack is not None:
            raise ValueError("clean scenarios must not configure an 'attack'")
        if self.episodes < 0 or self.max_steps < 1:
            raise ValueError("episodes must be >= 0 and max_steps >= 1")
        return self


def _field_error(e: ValidationError) -> str:
    first = e.errors()[0]
    field_name = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"field '{field_name}': {first['msg']}"


def config_from_dict(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration, {_field_error(e)}") from e


def load_config(path: str) -> RunConfig:
    """
    Read and validate a run configuration file.

    Raises:
        ConfigurationError: naming the offending field or the unreadable file
    """
    try:
        with open(path) as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Could not read config {path}: {e}")
        raise ConfigurationError(f"could not read config '{path}': {e}") from e
    config = config_from_dict(data)
    logger.info(f"Loaded config '{config.name}' ({config.scenario}) from {path}")
    return config


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Apply CLI-style overrides (None values are ignored) and revalidate."""
    data = config.model_dump()
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("metrics_path", "parameters_path", "trajectory_path", "report_path"):
            data["output"][key] = value
        else:
            data[key] = value
    return config_from_dict(data)


def resolve_output_path(path: Optional[str], base: Optional[str] = None) -> Optional[str]:
    """Join a relative path onto ``base``, or onto CONSENSUS_MARL_OUTPUT_DIR when no base is given."""
    if path is None or os.path.isabs(path):
        return path
    base = base or os.getenv(OUTPUT_DIR_ENV)
    return os.path.join(base, path) if base else path


def check_attack_roster(config: RunConfig, num_agents: int):
    """Assumption 7: exactly one adversary, and it must be an agent of the network."""
    if config.attack is None:
        return
    if not 0 <= config.attack.adversary < num_agents:
        raise AssumptionViolation(7, f"adversary {config.attack.adversary} is not one of the {num_agents} agents")
