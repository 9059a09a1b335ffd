"""Unit tests for building fusion layouts."""

import math

import pytest

from src.core.specs import LLAMA, CostModel, ClusterSpec, ParallelStrategy
from src.core.errors import ConfigError, LayoutError
from src.fusion.layout import build_layout, physical_stage, transform_problem


def make_cluster(num_gpus, capacity=math.inf):
    return ClusterSpec(num_gpus, 8, capacity, 80e9, 256, 100e9)


def test_physical_stage_reverses_model_b():
    assert [physical_stage(4, 2, 'A', 0, l) for l in range(4)] == [0, 1, 2, 3]
    assert [physical_stage(4, 2, 'B', 0, l) for l in range(2)] == [1, 0]
    assert [physical_stage(4, 2, 'B', 1, l) for l in range(2)] == [3, 2]


def test_build_layout_counts():
    layout = build_layout(4, 2, 4, 2, [1] * 4, [2] * 4, [1] * 2, [2] * 2)
    assert (layout.N, layout.K1, layout.K2) == (4, 1, 2)
    assert layout.num_subtasks == 2 * 4 * 4 + 2 * 2 * 2 * 2
    assert all(len(chunks) == 2 for chunks in layout.placement)
    assert sum(len(row) for row in layout.members) == layout.num_subtasks


def test_build_layout_dependencies():
    layout = build_layout(2, 2, 1, 1, [1, 1], [2, 2], [1, 1], [2, 2])
    by_key = layout.by_key
    fwd0 = by_key[('A', 0, 0, 0, 'fwd')]
    fwd1 = by_key[('A', 0, 0, 1, 'fwd')]
    bwd1 = by_key[('A', 0, 0, 1, 'bwd')]
    bwd0 = by_key[('A', 0, 0, 0, 'bwd')]
    assert layout.inter_dep[fwd0.uid] is None
    assert layout.inter_dep[fwd1.uid] == fwd0.uid
    assert layout.inter_dep[bwd1.uid] == fwd1.uid
    assert layout.inter_dep[bwd0.uid] == bwd1.uid
    # model B's first logical stage sits on the last physical stage
    assert by_key[('B', 0, 0, 0, 'fwd')].stage == 1


def test_build_layout_batch_mismatch():
    with pytest.raises(LayoutError) as exc:
        build_layout(4, 2, 2, 2, [1] * 4, [2] * 4, [1] * 2, [2] * 2)
    assert exc.value.code == "layout.batch_mismatch"


def test_build_layout_rejects_zero_latency():
    with pytest.raises(ConfigError):
        build_layout(2, 0, 1, 0, [1, 0], [2, 2])


def test_single_model_layout():
    layout = build_layout(3, 0, 2, 0, [1] * 3, [2] * 3)
    assert not layout.has_b
    assert layout.N == 3
    assert all(len(chunks) == 1 for chunks in layout.placement)


def test_transform_merges_model_b_stages():
    spec = LLAMA['13B']
    layout = transform_problem(
        spec,
        ParallelStrategy(1, 4, 8),
        spec,
        ParallelStrategy(1, 8, 4),
        global_batch=4,
        microbatch_size=1,
        cluster=make_cluster(32),
        cost=CostModel(),
    )
    assert layout.s == 2
    assert (layout.N1, layout.N2) == (4, 4)
    # two merged 5-layer tp4 stages cost the same as one 10-layer tp8 stage
    assert layout.fwd_latency[1] == pytest.approx(layout.fwd_latency[0])


def test_transform_requires_tp_order():
    spec = LLAMA['13B']
    with pytest.raises(LayoutError) as exc:
        transform_problem(
            spec,
            ParallelStrategy(1, 8, 4),
            spec,
            ParallelStrategy(1, 4, 8),
            global_batch=4,
            microbatch_size=1,
            cluster=make_cluster(32),
        )
    assert exc.value.code == "layout.tp_order"


def test_transform_layer_split():
    spec = LLAMA['33B']
    args = dict(global_batch=8, microbatch_size=1, cluster=make_cluster(64))
    with pytest.raises(LayoutError) as exc:
        transform_problem(spec, ParallelStrategy(1, 8, 8), None, None, **args)
    assert exc.value.code == "layout.layers_not_divisible"
    layout = transform_problem(spec, ParallelStrategy(1, 8, 8), None, None, layer_split='fractional', **args)
    assert layout.N == 8 and not layout.has_b


def test_transform_batch_not_divisible():
    spec = LLAMA['13B']
    with pytest.raises(LayoutError) as exc:
        transform_problem(
            spec, ParallelStrategy(2, 2, 8), None, None,
            global_batch=3, microbatch_size=1, cluster=make_cluster(32),
        )
    assert exc.value.code == "layout.batch_not_divisible"


def test_transform_pool_mismatch():
    spec = LLAMA['13B']
    with pytest.raises(ConfigError) as exc:
        transform_problem(
            spec, ParallelStrategy(1, 2, 8), None, None,
            global_batch=2, microbatch_size=1, cluster=make_cluster(32),
        )
    assert exc.value.code == "config.pool_mismatch"


def test_embedding_latency_on_outer_stages():
    spec = LLAMA['13B']
    args = dict(global_batch=4, microbatch_size=1, cluster=make_cluster(32), seq_len=512)
    plain = transform_problem(spec, ParallelStrategy(1, 4, 8), None, None, **args)
    charged = transform_problem(
        spec, ParallelStrategy(1, 4, 8), None, None,
        cost=CostModel(include_embedding_latency=True), **args,
    )
    fwd, expected_fwd = charged.fwd_latency[0], plain.fwd_latency[0]
    assert fwd[1:3] == expected_fwd[1:3]
    assert fwd[0] == fwd[3]
    assert fwd[0] > expected_fwd[0]
    assert charged.bwd_latency[0][0] > plain.bwd_latency[0][0]
    # one vocab x hidden matrix on each outer stage
    extra = fwd[0] - expected_fwd[0]
    assert extra == pytest.approx(spec.vocab_size * spec.hidden_size * 512 * CostModel().time_per_token_coeff / 8)
