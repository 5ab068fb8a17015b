from pathlib import Path

import pytest

from fbsdenet.errors import ConfigError
from fbsdenet.schemas.run_config import RunConfig, load_config, parse_config
from fbsdenet.services.mlmc import Marker
from fbsdenet.utils.hashing import derive_seed

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = {"problem": {"name": "bsb"}}


def test_minimal_config_uses_defaults():
    config = parse_config(MINIMAL)
    assert config.seed == 0
    assert config.problem.d == 1
    assert config.grid.steps == 16
    assert config.network.layers == [32, 32, 32, 32]
    assert config.train.procedure == "single_level"
    assert config.experiment.markers == list(Marker)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="unknown key train.learning_rat"):
        parse_config({**MINIMAL, "train": {"learning_rat": 0.1}})
    with pytest.raises(ConfigError, match="unknown key colour"):
        parse_config({**MINIMAL, "colour": "blue"})


def test_missing_key_is_named():
    with pytest.raises(ConfigError, match="missing required key problem"):
        parse_config({})
    with pytest.raises(ConfigError, match="missing required key problem.name"):
        parse_config({"problem": {"d": 2}})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError, match="problem.sigma"):
        parse_config({"problem": {"name": "bsb", "sigma": 0.0}})
    with pytest.raises(ConfigError):
        parse_config({**MINIMAL, "problem": {"name": "heat"}})
    with pytest.raises(ConfigError):
        parse_config({**MINIMAL, "experiment": {"levels": [2, -1]}})
    with pytest.raises(ConfigError):
        parse_config({**MINIMAL, "experiment": {"eval_box": [2.0, 1.0]}})
    with pytest.raises(ConfigError):
        parse_config({**MINIMAL, "experiment": {"markers": ["hexagon"]}})


def test_grid_resolution_is_n_or_l():
    assert parse_config({**MINIMAL, "grid": {"N": 10}}).grid.steps == 10
    assert parse_config({**MINIMAL, "grid": {"L": 3}}).grid.steps == 8
    with pytest.raises(ConfigError, match="either N or L"):
        parse_config({**MINIMAL, "grid": {"N": 8, "L": 3}})


def test_derived_seeds_are_distinct_and_stable():
    config = parse_config({**MINIMAL, "seed": 42})
    seeds = config.resolved_seeds()
    assert seeds["master"] == 42
    assert len({seeds["network"], seeds["train"], seeds["lattice"], seeds["eval"]}) == 4
    assert seeds == parse_config({**MINIMAL, "seed": 42}).resolved_seeds()
    assert seeds["train"] == derive_seed(42, 1)


def test_explicit_seeds_win_over_derived():
    config = parse_config({
        **MINIMAL,
        "network": {"init_seed": 5},
        "train": {"seed": 6},
        "experiment": {"lattice_seed": 7},
    })
    assert (config.network_seed(), config.train_seed(), config.lattice_seed()) == (5, 6, 7)


def test_seed_override_replaces_master_seed():
    config = parse_config({**MINIMAL, "seed": 1}, seed_override=9)
    assert config.seed == 9
    assert config.train_seed() == derive_seed(9, 1)


def test_config_is_frozen():
    config = parse_config(MINIMAL)
    with pytest.raises(Exception):
        config.seed = 3


def test_shipped_configs_load():
    for path in sorted(CONFIGS.glob("*.toml")):
        assert isinstance(load_config(path), RunConfig)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[problem\nname = 'bsb'\n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(broken)
