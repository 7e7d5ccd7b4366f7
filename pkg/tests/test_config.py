import json
import os
import tempfile
from unittest.mock import patch

import pytest

from consensus_marl.config import (
    GridEnvConfig,
    RunConfig,
    check_attack_roster,
    config_from_dict,
    load_config,
    resolve_output_path,
    with_overrides,
)
from consensus_marl.core.errors import AssumptionViolation, ConfigurationError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.mark.parametrize("name", ["small_mdp_attacked.json", "small_mdp_clean.json", "small_mdp_actor.json",
                                  "grid_attacked_state_reward.json",
                                  "grid_attacked.json", "grid_clean.json"])
def test_shipped_configs_load(name):
    config = load_config(os.path.join(CONFIG_DIR, name))
    assert isinstance(config, RunConfig)
    assert (config.attack is not None) == (config.scenario == "attacked")


def test_defaults():
    config = config_from_dict({})
    assert config.scenario == "clean"
    assert config.environment.kind == "small_mdp"
    assert config.environment.num_agents == 3


def test_error_names_offending_field():
    with pytest.raises(ConfigurationError) as info:
        config_from_dict({"step_sizes": {"critic_exponent": "fast"}})
    assert "step_sizes.critic_exponent" in str(info.value)
    with pytest.raises(ConfigurationError) as info:
        config_from_dict({"episodes": 3, "unknown_key": 1})
    assert "unknown_key" in str(info.value)


def test_scenario_and_attack_must_agree():
    with pytest.raises(ConfigurationError):
        config_from_dict({"scenario": "attacked"})
    with pytest.raises(ConfigurationError):
        config_from_dict({"scenario": "clean", "attack": {"adversary": 0}})


def test_environment_discriminator():
    config = config_from_dict({"environment": {"kind": "grid", "width": 5, "height": 5, "desired": [[0, 0], [4, 4]]}})
    assert isinstance(config.environment, GridEnvConfig)
    assert config.environment.num_agents == 2
    assert config_from_dict({"environment": {"kind": "mdp_file", "path": "x.json"}}).environment.kind == "mdp_file"


def test_overrides_revalidate():
    config = config_from_dict({"seed": 1})
    updated = with_overrides(config, seed=9, episodes=None, metrics_path="out.csv")
    assert updated.seed == 9 and updated.episodes == config.episodes
    assert updated.output.metrics_path == "out.csv"
    with pytest.raises(ConfigurationError):
        with_overrides(config, max_steps=0)


def test_attack_roster():
    config = config_from_dict({"scenario": "attacked", "attack": {"adversary": 4}})
    with pytest.raises(AssumptionViolation) as info:
        check_attack_roster(config, 3)
    assert info.value.assumption == 7
    check_attack_roster(config_from_dict({}), 3)


def test_unreadable_config():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/config.json")
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "bad.json")
        with open(path, "w") as handle:
            handle.write("{")
        with pytest.raises(ConfigurationError):
            load_config(path)
        path = os.path.join(temp_dir, "good.json")
        with open(path, "w") as handle:
            json.dump({"name": "x", "seed": 3}, handle)
        assert load_config(path).seed == 3


def test_output_directory_from_environment():
    with patch.dict(os.environ, {"CONSENSUS_MARL_OUTPUT_DIR": "/tmp/results"}):
        assert resolve_output_path("metrics.csv") == os.path.join("/tmp/results", "metrics.csv")
        assert resolve_output_path("/abs/metrics.csv") == "/abs/metrics.csv"
        assert resolve_output_path("metrics.csv", "/tmp/other") == os.path.join("/tmp/other", "metrics.csv")
    with patch.dict(os.environ, {}, clear=True):
        assert resolve_output_path("metrics.csv") == "metrics.csv"
    assert resolve_output_path(None) is None
