"""Unit tests for YAML run configuration."""

from pathlib import Path

import pytest

from src.core.specs import LLAMA
from src.core.errors import ConfigError
from src.cli.config import load_config, parse_config

CONFIG_DIR = Path(__file__).resolve().parents[2] / "config"


def minimal(**sections):
    raw = {'cluster': {'num_gpus': 32, 'gpus_per_node': 8}}
    raw.update(sections)
    return raw


def test_presets_and_schedule():
    config = load_config(str(CONFIG_DIR / "symmetric.yaml"))
    problem = config.require('schedule')
    assert problem.model_a.num_layers == LLAMA['13B'].num_layers
    assert problem.model_a.name == 'policy'
    assert problem.strategy_b.pp == 4
    assert config.num_chains == 4
    assert config.cluster.num_gpus == 32


def test_repository_configs_parse():
    for path in sorted(CONFIG_DIR.glob("*.yaml")):
        assert load_config(str(path)).source == str(path)


def test_missing_section():
    config = parse_config(minimal())
    with pytest.raises(ConfigError) as exc:
        config.require('generation')
    assert exc.value.code == "config.missing_section"
    with pytest.raises(ConfigError) as exc:
        parse_config({'models': {}})
    assert exc.value.code == "config.missing_section"


def test_unknown_model_and_preset():
    schedule = {
        'model_a': 'ghost',
        'strategy_a': {'dp': 1, 'pp': 4, 'tp': 8},
        'global_batch_samples': 4,
    }
    with pytest.raises(ConfigError) as exc:
        parse_config(minimal(schedule=schedule))
    assert exc.value.code == "config.unknown_model"
    with pytest.raises(ConfigError) as exc:
        parse_config(minimal(models={'m': {'preset': '7B'}}))
    assert exc.value.code == "config.unknown_preset"


def test_bad_value():
    with pytest.raises(ConfigError):
        parse_config({'cluster': {'num_gpus': 'many'}})


def test_yaml_and_read_errors(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("cluster: [1,\n")
    with pytest.raises(ConfigError) as exc:
        load_config(str(path))
    assert exc.value.code == "config.yaml"
    with pytest.raises(ConfigError) as exc:
        load_config(str(tmp_path / "absent.yaml"))
    assert exc.value.code == "config.unreadable"


def test_grid_forms():
    assert parse_config(minimal(sweep={'grid': {'start': 0.05, 'stop': 0.15, 'step': 0.05}})).sweep_grid == (
        0.05,
        0.1,
        0.15,
    )
    assert parse_config(minimal(sweep={'grid': [0.1, 0.2]})).sweep_grid == (0.1, 0.2)
    with pytest.raises(ConfigError) as exc:
        parse_config(minimal(sweep={'grid': []}))
    assert exc.value.code == "config.grid"


def test_empirical_lengths_relative_to_config(tmp_path):
    (tmp_path / "lengths.txt").write_text("10\n20\n")
    generation = {
        'actor': 'actor',
        'num_instances': 4,
        'lengths': {'kind': 'empirical', 'file': 'lengths.txt', 'max_tokens': 64},
    }
    config = parse_config(
        minimal(models={'actor': {'preset': '13B'}}, generation=generation), base_dir=tmp_path
    )
    assert config.generation.lengths.values == (10, 20)
    assert config.generation.lengths.max_len == 64


def test_with_overrides():
    config = parse_config(minimal())
    out = config.with_overrides(seed=7, chains=3)
    assert out.anneal.rng_seed == 7
    assert out.num_chains == 3
    assert config.with_overrides() is config
    with pytest.raises(ConfigError) as exc:
        config.with_overrides(chains=0)
    assert exc.value.code == "config.chains"


def test_embedding_latency_flag():
    assert not parse_config(minimal()).cost.include_embedding_latency
    config = parse_config(minimal(cost={'include_embedding_latency': True}))
    assert config.cost.include_embedding_latency
    with pytest.raises(ConfigError):
        parse_config(minimal(cost={'include_embedding_latency': 'yes'}))
