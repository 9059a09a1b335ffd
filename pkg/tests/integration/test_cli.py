"""
CLI integration tests: every subcommand end to end on small configurations.
"""

import json
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner
from deepdiff import DeepDiff

from src.cli.main import cli
from src.cli.config import load_config
from src.cli.commands import build_layout_from_config
from src.cli.schedule_io import read_schedule
from src.fusion.schedule import standalone_makespan

CONFIG_DIR = Path(__file__).resolve().parents[2] / "config"
CLEAN_ENV = {
    'FUSEPLAN_CONFIG': None,
    'FUSEPLAN_SEED': None,
    'FUSEPLAN_CHAINS': None,
    'FUSEPLAN_OUTPUT_DIR': None,
}

SMALL_GENERATION = """
cluster:
  num_gpus: 16
  gpus_per_node: 8
  kv_capacity_bytes: 3.8e+10
  bs_max: 8
cost:
  decode_step_seconds: 0.003
models:
  actor: {preset: 13B}
  critic: {preset: 13B}
generation:
  actor: actor
  inference:
    - {name: critic, model: critic}
  num_instances: 2
  gpus_per_instance: 8
  global_batch_samples: 32
  prompt_tokens: 32
  lengths: {kind: lognormal, median_tokens: 40, p999_ratio: 10.0, max_tokens: 256}
sweep:
  grid: [0.1, 0.2, 0.4]
"""

SMALL_GAE = """
cluster:
  num_gpus: 8
gae:
  instances: 20
  max_horizon: 64
  seed: 3
"""

WRONG_TP_ORDER = """
cluster:
  num_gpus: 32
models:
  a: {preset: 13B}
  b: {preset: 13B}
schedule:
  model_a: a
  strategy_a: {dp: 1, pp: 8, tp: 4}
  model_b: b
  strategy_b: {dp: 1, pp: 4, tp: 8}
  global_batch_samples: 8
"""


SMALL_ITERATION = """
cluster:
  num_gpus: 32
  gpus_per_node: 8
  kv_capacity_bytes: 7.4e+10
  bs_max: 256
models:
  actor: {preset: 13B}
  critic: {preset: 13B}
iteration:
  actor: actor
  ref: actor
  critic: critic
  reward: critic
  actor_train: {dp: 1, pp: 4, tp: 8}
  critic_train: {dp: 1, pp: 4, tp: 8}
  generation_gpus: 8
  global_batch_samples: 8
  mini_batch_samples: 4
  prompt_tokens: 16
  lengths: {kind: lognormal, median_tokens: 20, p999_ratio: 10.0, max_tokens: 100}
sweep:
  grid: [0.25, 0.5]
"""

def invoke(*args):
    return CliRunner().invoke(cli, list(args), env=CLEAN_ENV)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


@pytest.mark.integration
def test_schedule_command_is_reproducible(tmp_path):
    config = str(CONFIG_DIR / "symmetric.yaml")
    first, second = tmp_path / "first", tmp_path / "second"
    result = invoke('schedule', '--config', config, '--chains', '2', '--out', str(first))
    assert result.exit_code == 0, result.output
    assert 'lower_bound' in result.output
    result = invoke('schedule', '--config', config, '--chains', '2', '--out', str(second))
    assert result.exit_code == 0, result.output
    for name in ('schedule.txt', 'schedule.svg', 'stats.json'):
        assert (first / name).read_bytes() == (second / name).read_bytes()


@pytest.mark.integration
def test_schedule_file_reproduces_stats(tmp_path):
    config_path = str(CONFIG_DIR / "symmetric.yaml")
    result = invoke('schedule', '--config', config_path, '--chains', '1', '--out', str(tmp_path))
    assert result.exit_code == 0, result.output
    stats = json.loads((tmp_path / "stats.json").read_text())
    layout = build_layout_from_config(load_config(config_path))
    schedule = read_schedule(tmp_path / "schedule.txt", layout)
    assert schedule.energy == pytest.approx(stats['energy'], rel=1e-12)
    assert stats['lower_bound'] <= stats['energy'] <= stats['greedy_energy'] * (1 + 1e-12)
    assert stats['energy'] <= stats['serial_makespan'] * (1 + 1e-12)


@pytest.mark.integration
def test_oracle_command(tmp_path):
    result = invoke('oracle', '--config', str(CONFIG_DIR / "oracle_tiny.yaml"), '--out', str(tmp_path))
    assert result.exit_code == 0, result.output
    data = json.loads((tmp_path / "oracle.json").read_text())
    assert data['ordered']
    assert data['lower_bound'] <= data['oracle'] <= data['serial']


@pytest.mark.integration
def test_baselines_command(tmp_path):
    result = invoke('baselines', '--config', str(CONFIG_DIR / "baselines.yaml"), '--out', str(tmp_path))
    assert result.exit_code == 0, result.output
    table = pd.read_csv(tmp_path / "baselines.csv")
    assert table['matches'].all()


@pytest.mark.integration
def test_sweep_command(tmp_path):
    config = write(tmp_path, "generation.yaml", SMALL_GENERATION)
    out = tmp_path / "out"
    result = invoke('sweep-rt', '--config', config, '--out', str(out))
    assert result.exit_code == 0, result.output
    curve = pd.read_csv(out / "sweep_rt.csv")
    assert len(curve) == 4
    assert curve.loc[0, 'ratio'] == 0.0
    assert (out / "timeline_best.csv").read_text().startswith("time,instance,kind,sample")


@pytest.mark.integration
def test_gae_check_command(tmp_path):
    config = write(tmp_path, "gae.yaml", SMALL_GAE)
    out = tmp_path / "out"
    result = invoke('gae-check', '--config', config, '--out', str(out))
    assert result.exit_code == 0, result.output
    actual = json.loads((out / "gae_check.json").read_text())
    expected = {'instances': 20, 'max_horizon': 64, 'failures': 0, 'passed': True}
    diff = DeepDiff({k: actual[k] for k in expected}, expected)
    assert not diff


@pytest.mark.integration
def test_missing_config_exits_2(tmp_path):
    result = invoke('schedule', '--out', str(tmp_path))
    assert result.exit_code == 2
    assert 'error[config.missing]' in result.output


@pytest.mark.integration
def test_missing_section_exits_2(tmp_path):
    result = invoke('sweep-rt', '--config', str(CONFIG_DIR / "symmetric.yaml"), '--out', str(tmp_path))
    assert result.exit_code == 2
    assert 'config.missing_section' in result.output


@pytest.mark.integration
def test_infeasible_layout_exits_3(tmp_path):
    config = write(tmp_path, "bad.yaml", WRONG_TP_ORDER)
    result = invoke('schedule', '--config', config, '--out', str(tmp_path / "out"))
    assert result.exit_code == 3
    assert 'layout.tp_order' in result.output
    assert not (tmp_path / "out" / "stats.json").exists()


@pytest.mark.integration
def test_iterate_base_writes_strategies(tmp_path):
    config = write(tmp_path, "iteration.yaml", SMALL_ITERATION)
    out = tmp_path / "out"
    result = invoke('iterate', '--config', config, '--mode', 'base', '--out', str(out))
    assert result.exit_code == 0, result.output
    strategies = pd.read_csv(out / "strategies.csv")
    assert strategies['task'].tolist() == ['actor_train', 'critic_train', 'ref_forward', 'reward_forward']
    data = json.loads((out / "iterate.json").read_text())
    assert len(data['strategies']) == 4
    assert data['base']['total'] > 0


@pytest.mark.slow
@pytest.mark.integration
def test_iterate_reference_breakdown(tmp_path):
    result = invoke('iterate', '--config', str(CONFIG_DIR / "iteration.yaml"), '--out', str(tmp_path))
    assert result.exit_code == 0, result.output
    data = json.loads((tmp_path / "iterate.json").read_text())
    for mode in ('base', 'fused'):
        assert data[mode]['others'] / data[mode]['total'] < 0.03
    assert data['speedup']['gen_plus_inf'] >= 1.2
    assert 1.1 <= data['speedup']['train'] <= 1.4
    assert (tmp_path / "strategies.csv").exists()


@pytest.mark.slow
@pytest.mark.integration
def test_case_study_schedule_matches_standalone_actor(tmp_path):
    config_path = str(CONFIG_DIR / "case_study.yaml")
    result = invoke('schedule', '--config', config_path, '--out', str(tmp_path))
    assert result.exit_code == 0, result.output
    stats = json.loads((tmp_path / "stats.json").read_text())
    layout = build_layout_from_config(load_config(config_path))
    assert stats['energy'] <= 1.02 * standalone_makespan(layout, 'A')
    assert max(stats['peak_memory']) <= 1.02 * max(stats['serial_peak_memory'])


@pytest.mark.slow
@pytest.mark.integration
def test_doubling_chains_never_worsens_energy(tmp_path):
    config = str(CONFIG_DIR / "symmetric.yaml")
    energies = []
    for chains in ('32', '64'):
        out = tmp_path / chains
        result = invoke('schedule', '--config', config, '--chains', chains, '--out', str(out))
        assert result.exit_code == 0, result.output
        energies.append(json.loads((out / "stats.json").read_text())['energy'])
    assert energies[1] <= energies[0]
