import asyncio
import json
import re

import numpy as np
import pytest

from config_manager import ConfigManager, derive_seed, parse_config
from error_handler import ConfigurationError


@pytest.fixture
def repo_config(repo_root):
    return json.loads((repo_root / "config.json").read_text())


def test_derive_seed_is_stable_and_separates_stages():
    assert derive_seed(7, "split") == derive_seed(7, "split")
    seeds = {derive_seed(7, stage) for stage in ("generate", "split", "train-vae", "train-fair", "evaluate")}
    assert len(seeds) == 5
    assert derive_seed(7, "generate", 0) != derive_seed(7, "generate", 1)
    assert derive_seed(7, "split") != derive_seed(8, "split")
    assert 0 <= derive_seed(123, "evaluate") < 2 ** 63


def test_repo_config_parses(repo_config):
    config = parse_config(repo_config)
    assert config.seed == 7
    assert config.split.fractions == (0.8, 0.1, 0.1)
    assert config.fair.clp_weights == (0.0, 0.01, 0.1, 1.0, 10.0)
    assert config.dataset.sem.group_outcome_effects == (0.0, 2.0)


def test_unknown_key_names_dotted_path(repo_config):
    repo_config["cevae"]["bogus"] = 1
    with pytest.raises(ConfigurationError, match="Unknown config key 'cevae.bogus'"):
        parse_config(repo_config)


def test_unknown_top_level_key(repo_config):
    repo_config["extra"] = True
    with pytest.raises(ConfigurationError, match="Unknown config key 'extra'"):
        parse_config(repo_config)


@pytest.mark.parametrize("fractions", [[0.8, 0.1, 0.2], [1.2, -0.1, -0.1], [0.5, 0.5]])
def test_bad_split_fractions_rejected(repo_config, fractions):
    repo_config["split"]["fractions"] = fractions
    with pytest.raises(ConfigurationError, match="split.fractions"):
        parse_config(repo_config)


def test_schema_version_checked(repo_config):
    repo_config["schema_version"] = 2
    with pytest.raises(ConfigurationError, match="schema_version"):
        parse_config(repo_config)


def test_file_source_needs_path(repo_config):
    repo_config["dataset"]["source"] = "file"
    with pytest.raises(ConfigurationError, match="dataset.path"):
        parse_config(repo_config)


def test_section_must_be_object(repo_config):
    repo_config["split"] = [0.8, 0.1, 0.1]
    with pytest.raises(ConfigurationError, match="'split' must be a JSON object"):
        parse_config(repo_config)


@pytest.mark.parametrize("section, key, value, expected", [
    ("fair", "epochs", "30", "'fair.epochs' must be an integer"),
    ("fair", "epochs", 30.5, "'fair.epochs' must be an integer"),
    ("fair", "learning_rates", [0.001, "fast"], "'fair.learning_rates' must be a list of numbers"),
    ("fair", "cf_gradients", [0], "'fair.cf_gradients' must be a list of booleans"),
    ("cevae", "layer_norm", "yes", "'cevae.layer_norm' must be a boolean"),
    ("cevae", "bandwidth", "auto", "'cevae.bandwidth' must be a number or null"),
    ("baseline", "patience", True, "'baseline.patience' must be an integer or null"),
    ("split", "fractions", [0.5, 0.5], "'split.fractions' must be a list of 3 numbers"),
])
def test_wrong_value_type_names_dotted_path(repo_config, section, key, value, expected):
    repo_config[section][key] = value
    with pytest.raises(ConfigurationError, match=re.escape(expected)):
        parse_config(repo_config)


def test_nested_wrong_type_and_accepted_forms(repo_config):
    repo_config["dataset"]["sem"]["latent_dim"] = "8"
    with pytest.raises(ConfigurationError, match=re.escape("'dataset.sem.latent_dim' must be an integer")):
        parse_config(repo_config)

    repo_config["dataset"]["sem"]["latent_dim"] = 8
    repo_config["cevae"]["learning_rate"] = 1
    repo_config["cevae"]["bandwidth"] = None
    config = parse_config(repo_config)
    assert config.cevae.learning_rate == 1
    assert config.cevae.bandwidth is None


def test_initialize_applies_overrides(tmp_path, repo_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(repo_config))
    manager = ConfigManager(str(path))
    config = asyncio.run(manager.initialize(seed=99, output_dir=str(tmp_path / "out")))
    assert config.seed == 99
    assert config.output_dir == str(tmp_path / "out")
    assert manager.get_config() is config
    payload = json.loads(manager.config_digest_payload())
    assert payload["seed"] == 99
    assert payload["split"]["fractions"] == [0.8, 0.1, 0.1]


def test_initialize_without_overrides_keeps_file_values(tmp_path, repo_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(repo_config))
    config = asyncio.run(ConfigManager(str(path)).initialize())
    assert (config.seed, config.output_dir) == (7, "runs/tiny")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError, match="Config file not found"):
        asyncio.run(ConfigManager(str(tmp_path / "absent.json")).initialize())


def test_invalid_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{ not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        asyncio.run(ConfigManager(str(path)).initialize())


def test_get_config_before_initialize():
    with pytest.raises(ConfigurationError, match="initialize"):
        ConfigManager("config.json").get_config()


def test_cevae_search_space_falls_back_to_fixed_values(repo_config):
    cevae = parse_config(repo_config).cevae
    space = cevae.search_space()
    assert space.hidden_dims == (32,)
    assert space.learning_rates == (0.001,)
    assert space.group_embedding_dims == (8,)


def test_cevae_search_space_uses_lists_when_given(repo_config):
    repo_config["cevae"]["search"]["learning_rates"] = [0.01, 0.001]
    space = parse_config(repo_config).cevae.search_space()
    assert space.learning_rates == (0.01, 0.001)
    assert space.hidden_dims == (32,)


def test_cevae_spec_carries_data_shape(repo_config):
    spec = parse_config(repo_config).cevae.spec(feature_dim=50, group_count=2)
    assert (spec.feature_dim, spec.group_count) == (50, 2)
    assert spec.lambda_mmd == 10000.0


def test_sem_config_seeds_follow_master_seed(repo_config):
    config = parse_config(repo_config)
    sem = config.sem_config()
    assert sem.seed == derive_seed(7, "generate", 1)
    again = config.sem_config()
    assert np.array_equal(sem.latent_to_features, again.latent_to_features)
    assert np.array_equal(sem.group_to_outcome, again.group_to_outcome)
    repo_config["seed"] = 8
    assert parse_config(repo_config).sem_config().seed != sem.seed
