"""Unit tests for output lengths, the decode loop, migration planning and the threshold sweep."""

import math
from pathlib import Path

import numpy as np
import pytest

from src.core.specs import LLAMA, CostModel, ClusterSpec
from src.core.errors import ConfigError, InfeasibleError
from src.genfuse.lengths import LengthDistribution, empirical, load_lengths, sample_lengths
from src.genfuse.cluster import EventKind, GenSample, GenInstance, DecodeEngine
from src.genfuse.migration import (
    KV_TRANSFER,
    GenClusterState,
    plan_migration,
    select_destinations,
    required_destinations,
)
from src.genfuse.simulator import (
    InferenceTask,
    fluid_fifo,
    make_batch,
    trigger_time,
    simulate_fused,
    simulate_serial,
)
from src.cli.config import load_config
from src.genfuse.sweep import GenerationSetup, refine_threshold, sweep_threshold, threshold_samples

SPEC = LLAMA['13B']
CONFIG_DIR = Path(__file__).resolve().parents[2] / "config"


def make_instance(i=0, bs_max=4, kv_capacity=1e12, decode_step=1.0):
    return GenInstance(i, bs_max, kv_capacity, decode_step, SPEC, gpus=8)


def make_cluster(bs_max=4, kv_capacity=1e12, bandwidth=math.inf):
    return ClusterSpec(16, 8, math.inf, kv_capacity, bs_max, bandwidth)


def test_lognormal_tail_ratio():
    dist = LengthDistribution(median=200, p999_ratio=10, max_len=100000)
    lengths = sample_lengths(dist, 200000, seed=0)
    ratio = np.quantile(lengths, 0.999) / np.median(lengths)
    assert 8 <= ratio <= 12


def test_sample_lengths_deterministic_and_clipped():
    dist = LengthDistribution(median=200, p999_ratio=10, max_len=300)
    a = sample_lengths(dist, 1000, seed=5)
    b = sample_lengths(dist, 1000, seed=5)
    assert np.array_equal(a, b)
    assert a.min() >= 1 and a.max() <= 300


def test_empirical_replays_values():
    dist = empirical([5, 7], max_len=6)
    lengths = sample_lengths(dist, 4, seed=1)
    assert sorted(lengths.tolist()) == [5, 5, 6, 6]


def test_length_distribution_validation():
    with pytest.raises(ConfigError) as exc:
        LengthDistribution(kind='uniform')
    assert exc.value.code == "config.lengths"
    with pytest.raises(ConfigError):
        LengthDistribution(p999_ratio=1.0)
    with pytest.raises(ConfigError):
        LengthDistribution(kind='empirical')


def test_load_lengths(tmp_path):
    path = tmp_path / "lengths.txt"
    path.write_text("3\n\n5\n")
    assert load_lengths(str(path)) == (3, 5)
    path.write_text("3\nabc\n")
    with pytest.raises(ConfigError):
        load_lengths(str(path))
    path.write_text("0\n")
    with pytest.raises(ConfigError):
        load_lengths(str(path))
    path.write_text("\n")
    with pytest.raises(ConfigError):
        load_lengths(str(path))


def test_decode_engine_finish_times():
    events = []
    engine = DecodeEngine(make_instance(), CostModel(), events)
    engine.submit([GenSample(0, 0, 2, 1.0), GenSample(1, 0, 3, 1.0)])
    engine.run()
    assert engine.finish == {0: 2.0, 1: 3.0}
    assert [e.kind for e in events].count(EventKind.FINISH) == 2
    assert engine.done


def test_decode_engine_waits_for_kv():
    events = []
    engine = DecodeEngine(make_instance(kv_capacity=3.0), CostModel(), events)
    engine.submit([GenSample(0, 0, 2, 1.0), GenSample(1, 0, 3, 1.0)])
    engine.run()
    assert engine.finish == {0: 2.0, 1: 5.0}
    assert engine.peak_reserved == 3.0


def test_decode_engine_rejects_oversized_sample():
    engine = DecodeEngine(make_instance(kv_capacity=3.0), CostModel(), [])
    with pytest.raises(InfeasibleError) as exc:
        engine.submit([GenSample(0, 0, 4, 1.0)])
    assert exc.value.code == "genfuse.kv_too_small"


def test_decode_step_grows_past_bs_max():
    engine = DecodeEngine(make_instance(bs_max=1), CostModel(), [])
    engine.submit([GenSample(0, 0, 1, 1.0), GenSample(1, 0, 1, 1.0)])
    engine.run()
    assert engine.finish == {0: 2.0, 1: 2.0}


def test_fluid_fifo():
    assert fluid_fifo([(0.0, 2.0, 0), (0.0, 2.0, 1)], [(0.0, 2)]) == {0: 1.0, 1: 2.0}
    # one instance until t=1, two afterwards
    assert fluid_fifo([(0.0, 3.0, 0)], [(0.0, 1), (1.0, 1)]) == {0: 2.0}
    with pytest.raises(InfeasibleError):
        fluid_fifo([(0.0, 1.0, 0)], [])


def test_trigger_time():
    finish = {0: 4.0, 1: 1.0, 2: 2.0, 3: 1.0}
    assert trigger_time(finish, 2) == 2.0
    assert trigger_time(finish, 4) == 1.0


def test_simulate_serial_without_inference():
    batch = make_batch([4, 1, 2, 1], 0, SPEC)
    result = simulate_serial(batch, [make_instance(0), make_instance(1)], (), CostModel())
    assert result.generation_end == 4.0
    assert result.total == 4.0
    assert result.finish == {0: 4.0, 1: 1.0, 2: 2.0, 3: 1.0}


def test_threshold_zero_is_serial():
    batch = make_batch([4, 1, 2, 1], 16, SPEC)
    instances = [make_instance(0), make_instance(1)]
    tasks = (InferenceTask('reward', SPEC),)
    serial = simulate_serial(batch, instances, tasks, CostModel())
    fused = simulate_fused(batch, instances, tasks, 0, make_cluster(), CostModel())
    assert fused.total == serial.total
    assert fused.plan is None


def test_fused_migrates_tail_and_preserves_generation():
    batch = make_batch([10, 10, 1, 1], 0, SPEC)
    instances = [make_instance(0), make_instance(1)]
    tasks = (InferenceTask('reward', SPEC),)
    serial = simulate_serial(batch, instances, tasks, CostModel())
    fused = simulate_fused(batch, instances, tasks, 3, make_cluster(), CostModel())
    plan = fused.plan
    assert plan.destinations == (0,)
    assert plan.migrated == (1,)
    assert plan.mechanism == KV_TRANSFER
    assert fused.generation_end == pytest.approx(serial.generation_end)
    assert fused.preserved
    assert fused.total <= serial.total + 1e-9
    kinds = {(e.kind, e.instance, e.sample) for e in fused.events}
    assert (EventKind.MIGRATE_OUT, 1, 1) in kinds
    assert (EventKind.MIGRATE_IN, 0, 1) in kinds


def test_required_destinations():
    assert required_destinations(0, 256, 1.0, 1e9) == 0
    assert required_destinations(300, 256, 1.0, 1e9) == 2
    assert required_destinations(10, 256, 100.0, 250.0) == 4


def test_select_destinations_ties_to_lower_id():
    assert select_destinations({0: 3, 1: 5, 2: 5}, 2) == (1, 2)
    assert select_destinations({0: 1, 1: 1}, 1) == (0,)


def test_plan_migration_noop_and_threshold():
    state = GenClusterState(
        time=1.0,
        instances=(make_instance(0), make_instance(1)),
        pending={0: (GenSample(0, 0, 3, 1.0),), 1: ()},
        kv_per_sample_max=3.0,
        spec=SPEC,
        cost=CostModel(),
    )
    plan = plan_migration(state, 0, make_cluster())
    assert plan.noop and plan.overhead == 0.0
    with pytest.raises(ConfigError) as exc:
        plan_migration(state, -1, make_cluster())
    assert exc.value.code == "config.threshold"


def test_threshold_samples():
    assert threshold_samples(0.0, 512) == 0
    assert threshold_samples(0.15, 512) == 77
    assert threshold_samples(0.001, 10) == 1


def small_setup():
    return GenerationSetup(
        actor=SPEC,
        inference_tasks=(InferenceTask('reward', SPEC),),
        num_instances=2,
        gpus_per_instance=8,
        global_batch=16,
        prompt_len=16,
        lengths=LengthDistribution(median=20, p999_ratio=10, max_len=200),
    )


def test_sweep_includes_serial_row():
    cluster = ClusterSpec(16, 8, math.inf, 3.8e10, 4, 1e11)
    best, curve = sweep_threshold(small_setup(), cluster, grid=(0.25, 0.5), n_jobs=1)
    assert curve['ratio'].tolist() == [0.0, 0.25, 0.5]
    assert curve.loc[0, 'r_t'] == 0
    assert curve.loc[0, 'speedup'] == 1.0
    assert best in (0.0, 0.25, 0.5)
    best_row = curve[curve['ratio'] == best].iloc[0]
    assert best_row['total_seconds'] == curve['total_seconds'].min()
    assert curve['preserved'].all()


def test_sweep_grid_errors():
    cluster = ClusterSpec(16, 8, math.inf, 3.8e10, 4, 1e11)
    with pytest.raises(ConfigError) as exc:
        sweep_threshold(small_setup(), cluster, grid=())
    assert exc.value.code == "config.grid"
    with pytest.raises(ConfigError):
        sweep_threshold(small_setup(), cluster, grid=(1.5,))


def test_refine_threshold_uses_observed_lengths():
    cluster = ClusterSpec(16, 8, math.inf, 3.8e10, 4, 1e11)
    observed = [10] * 14 + [150, 200]
    best, curve = refine_threshold(small_setup(), cluster, observed, grid=(0.25,), n_jobs=1)
    assert curve['ratio'].tolist() == [0.0, 0.25]
    assert best in (0.0, 0.25)
    with pytest.raises(ConfigError) as exc:
        refine_threshold(small_setup(), cluster, [], grid=(0.25,))
    assert exc.value.code == "config.lengths"


@pytest.mark.slow
def test_reference_sweep_has_interior_optimum():
    config = load_config(str(CONFIG_DIR / "sweep_rt.yaml"))
    best, curve = sweep_threshold(
        config.require('generation'), config.cluster, config.cost, config.sweep_grid, n_jobs=1
    )
    serial = curve.loc[0, 'total_seconds']
    assert 0.10 <= best <= 0.35
    assert best < curve['ratio'].max()
    assert curve['total_seconds'].min() <= serial / 1.1
    # generation never finishes later than serial plus the migration cost
    assert curve['preserved'].all()
    late = curve['generation_end_seconds'] > curve.loc[0, 'generation_end_seconds'] + curve['overhead_seconds'] + 1e-9 * serial
    assert not late.any()
