"""Unit tests for greedy start, annealing, bounds and multi-chain search."""

import numpy as np
import pytest

from src.core.errors import ConfigError, OracleLimitError, NeighborFrozenError
from src.fusion.layout import build_layout
from src.fusion.schedule import (
    check_valid,
    peak_memory,
    compute_energy,
    serial_makespan,
    serial_schedule,
    standalone_makespan,
)
from src.pipeline.baseline import makespan_1f1b
from src.annealer.anneal import (
    AnnealParams,
    anneal,
    NeighborSampler,
    memory_energy,
    optimize_memory,
    compute_neighbor,
    acceptance_probability,
)
from src.annealer.bounds import lower_bound, stage_bounds
from src.annealer.greedy import list_schedule, greedy_schedule
from src.annealer.oracle import exhaustive_oracle
from src.annealer.search import chain_seed, splitmix64, memory_pass, multi_seed_search

FAST = AnnealParams(alpha=0.9, epsilon=1e-2)


def tiny_layout():
    return build_layout(2, 2, 2, 2, [1.0] * 2, [2.0] * 2, [1.0] * 2, [2.0] * 2)


def symmetric_layout():
    return build_layout(4, 4, 4, 4, [1.0] * 4, [2.0] * 4, [1.0] * 4, [2.0] * 4)


def test_anneal_params_validation():
    with pytest.raises(ConfigError) as exc:
        AnnealParams(alpha=1.0)
    assert exc.value.code == "config.alpha"
    with pytest.raises(ConfigError):
        AnnealParams(epsilon=0)
    with pytest.raises(ConfigError):
        AnnealParams(rng_seed=-1)
    with pytest.raises(ConfigError):
        AnnealParams(neighbors_per_temperature=0)
    with pytest.raises(ConfigError) as exc:
        AnnealParams(temperature_scale=0.0)
    assert exc.value.code == "config.temperature"
    with pytest.raises(ConfigError) as exc:
        AnnealParams(critical_rate=0.8, shift_rate=0.3)
    assert exc.value.code == "config.move_rate"
    with pytest.raises(ConfigError) as exc:
        AnnealParams(shift_rate=-0.1)
    assert exc.value.code == "config.move_rate"


def test_anneal_steps():
    assert AnnealParams(alpha=0.5, epsilon=0.3).steps == 2


def test_acceptance_probability():
    assert acceptance_probability(10.0, 9.0, 1.0) == 1.0
    assert acceptance_probability(10.0, 11.0, 1.0) == pytest.approx(np.exp(-1.0))


def test_single_model_bound_is_1f1b():
    layout = build_layout(4, 0, 6, 0, [1.0] * 4, [2.0] * 4)
    assert lower_bound(layout) == pytest.approx(makespan_1f1b(4, 6, [1.0] * 4, [2.0] * 4))


def test_stage_bounds_hand_example():
    # stage 0 hosts A at logical 0 and B at logical 1: 0 + 12 + 0
    assert stage_bounds(tiny_layout()) == [12.0, 12.0]


def test_greedy_valid_and_not_slower_than_serial():
    for layout in (tiny_layout(), symmetric_layout()):
        greedy = greedy_schedule(layout)
        assert check_valid(greedy, layout)
        assert lower_bound(layout) <= greedy.energy <= serial_makespan(layout) + 1e-9


def test_list_schedule_respects_capacity():
    layout = build_layout(2, 2, 2, 2, [1.0] * 2, [2.0] * 2, [1.0] * 2, [2.0] * 2, capacity=2.0)
    schedule = list_schedule(layout)
    assert check_valid(schedule, layout)
    assert max(peak_memory(schedule, layout)) <= 2.0


def test_compute_neighbor_is_adjacent_swap():
    layout = symmetric_layout()
    start = greedy_schedule(layout)
    neighbor = compute_neighbor(start, layout, np.random.default_rng(0))
    assert check_valid(neighbor, layout)
    differing = [
        p for p, (a, b) in enumerate(zip(start.uid_rows(), neighbor.uid_rows())) if a != b
    ]
    assert len(differing) == 1
    a, b = start.uid_rows()[differing[0]], neighbor.uid_rows()[differing[0]]
    assert sorted(a) == sorted(b)
    assert sum(x != y for x, y in zip(a, b)) == 2


def test_anneal_never_worse_than_start():
    layout = symmetric_layout()
    greedy = greedy_schedule(layout)
    best = anneal(greedy, layout, FAST)
    assert check_valid(best, layout)
    assert best.energy <= greedy.energy
    assert best.energy >= lower_bound(layout) - 1e-9
    assert best.energy == compute_energy(best, layout)


def test_anneal_with_several_neighbors_per_temperature():
    layout = symmetric_layout()
    greedy = greedy_schedule(layout)
    params = AnnealParams(alpha=0.9, epsilon=1e-2, neighbors_per_temperature=4)
    best = anneal(greedy, layout, params)
    assert check_valid(best, layout)
    assert lower_bound(layout) - 1e-9 <= best.energy <= greedy.energy


def test_anneal_deterministic():
    layout = symmetric_layout()
    a = anneal(greedy_schedule(layout), layout, FAST)
    b = anneal(greedy_schedule(layout), layout, FAST)
    assert a.uid_rows() == b.uid_rows()


def frozen_layout():
    # one stage, one micro-batch: every reordering breaks the dependency
    return build_layout(1, 0, 1, 0, [1.0], [2.0])


def test_anneal_frozen_state_raises_with_best():
    layout = frozen_layout()
    start = greedy_schedule(layout)
    with pytest.raises(NeighborFrozenError) as exc:
        anneal(start, layout, FAST)
    assert exc.value.code == "anneal.frozen"
    assert exc.value.best.uid_rows() == start.uid_rows()
    assert exc.value.best.energy == start.energy


def test_memory_pass_frozen_state_raises_with_best():
    layout = frozen_layout()
    start = greedy_schedule(layout)
    with pytest.raises(NeighborFrozenError) as exc:
        optimize_memory(start, layout, FAST)
    assert exc.value.best.uid_rows() == start.uid_rows()

    actual_schedule, actual_frozen = memory_pass(start, layout, FAST)
    assert actual_frozen
    assert actual_schedule.uid_rows() == start.uid_rows()


def test_search_flags_frozen_chains():
    layout = frozen_layout()
    best, report = multi_seed_search(layout, FAST, 2, n_jobs=1)
    assert all(chain.frozen for chain in report.chains)
    assert best.energy == report.greedy_energy
    assert report.to_text().splitlines()[1].endswith(",1")


def test_sampler_moves_keep_rows_valid():
    layout = symmetric_layout()
    start = greedy_schedule(layout)
    mixes = (
        AnnealParams(critical_rate=1.0, shift_rate=0.0),
        AnnealParams(critical_rate=0.0, shift_rate=1.0),
        AnnealParams(critical_rate=0.0, shift_rate=0.0),
    )
    for params in mixes:
        sample = NeighborSampler(layout, params, np.random.default_rng(3))
        current = start
        for _ in range(20):
            neighbor = sample(current)
            assert check_valid(neighbor, layout)
            assert neighbor.energy == compute_energy(neighbor, layout)
            for a, b in zip(current.uid_rows(), neighbor.uid_rows()):
                assert sorted(a) == sorted(b)
            current = neighbor


def test_relief_sampler_respects_admissible():
    layout = symmetric_layout()
    start = greedy_schedule(layout)
    limit = serial_makespan(layout)
    sample = NeighborSampler(
        layout,
        AnnealParams(critical_rate=0.5, shift_rate=0.5),
        np.random.default_rng(5),
        admissible=lambda s: s.energy <= limit,
        relieve_memory=True,
    )
    current = start
    for _ in range(10):
        current = sample(current)
        assert check_valid(current, layout)
        assert current.energy <= limit


def test_memory_energy_is_max_plus_mean():
    layout = symmetric_layout()
    schedule = greedy_schedule(layout)
    peaks = peak_memory(schedule, layout)
    expected = max(peaks) + 0.01 * sum(peaks) / len(peaks)
    assert memory_energy(schedule, layout) == pytest.approx(expected)


def test_memory_pass_keeps_makespan():
    layout = symmetric_layout()
    best = anneal(greedy_schedule(layout), layout, FAST)
    compact = optimize_memory(best, layout, FAST)
    assert check_valid(compact, layout)
    assert compact.energy <= best.energy
    assert max(peak_memory(compact, layout)) <= max(peak_memory(best, layout))


def test_splitmix_seeds():
    assert chain_seed(7, 0) == 7
    assert chain_seed(7, 1) == splitmix64(7, 1)
    assert splitmix64(7, 1) != splitmix64(7, 2)
    assert 0 <= splitmix64(0, 1) < 2**64


def test_single_chain_equals_anneal():
    layout = symmetric_layout()
    greedy = greedy_schedule(layout)
    direct = anneal(greedy, layout, FAST)
    searched, report = multi_seed_search(layout, FAST, 1, greedy, n_jobs=1)
    assert searched.uid_rows() == direct.uid_rows()
    assert report.best_seed == FAST.rng_seed
    assert report.greedy_energy == greedy.energy


def test_more_chains_never_worse():
    layout = symmetric_layout()
    two, _ = multi_seed_search(layout, FAST, 2, n_jobs=1)
    four, report = multi_seed_search(layout, FAST, 4, n_jobs=1)
    assert four.energy <= two.energy
    assert len(report.chains) == 4
    assert report.gap >= -1e-12
    assert "lower_bound" in report.to_text()


def test_search_rejects_zero_chains():
    with pytest.raises(ConfigError) as exc:
        multi_seed_search(tiny_layout(), FAST, 0)
    assert exc.value.code == "config.chains"


def test_oracle_ordering_chain():
    layout = tiny_layout()
    result = exhaustive_oracle(layout)
    greedy = greedy_schedule(layout)
    best, _ = multi_seed_search(layout, FAST, 2, greedy, n_jobs=1)
    assert check_valid(result.schedule, layout)
    assert result.energy == compute_energy(result.schedule, layout)
    assert lower_bound(layout) <= result.energy + 1e-9
    assert result.energy <= best.energy + 1e-9
    assert best.energy <= greedy.energy + 1e-9
    assert greedy.energy <= serial_makespan(layout) + 1e-9


def test_oracle_size_guard():
    with pytest.raises(OracleLimitError) as exc:
        exhaustive_oracle(symmetric_layout())
    assert exc.value.code == "oracle.too_large"


def test_oracle_single_model_is_1f1b():
    layout = build_layout(2, 0, 3, 0, [1.0] * 2, [2.0] * 2)
    assert exhaustive_oracle(layout).energy == pytest.approx(standalone_makespan(layout, 'A'))


def random_tiny_layout(rng):
    n = int(rng.integers(1, 3))
    m = int(rng.integers(1, 3))
    fwd_a = [float(rng.integers(1, 4)) for _ in range(n)]
    fwd_b = [float(rng.integers(1, 4)) for _ in range(n)]
    return build_layout(n, n, m, m, fwd_a, [2 * x for x in fwd_a], fwd_b, [2 * x for x in fwd_b])


@pytest.mark.slow
def test_ordering_chain_random_instances():
    rng = np.random.default_rng(2024)
    params = AnnealParams(alpha=0.95, epsilon=1e-3)
    matches = 0
    for _ in range(200):
        layout = random_tiny_layout(rng)
        oracle = exhaustive_oracle(layout).energy
        greedy = greedy_schedule(layout)
        best, _ = multi_seed_search(layout, params, 4, greedy, n_jobs=1)
        tol = 1e-9 * serial_makespan(layout)
        assert lower_bound(layout) <= oracle + tol
        assert oracle <= best.energy + tol
        assert best.energy <= greedy.energy + tol
        assert greedy.energy <= serial_makespan(layout) + tol
        matches += best.energy <= oracle + tol
    assert matches >= 192


def random_memory_layout(rng):
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    fwd_a = [float(rng.integers(1, 4)) for _ in range(n)]
    fwd_b = [float(rng.integers(1, 4)) for _ in range(n)]
    act_a = [float(rng.integers(1, 4)) for _ in range(n)]
    act_b = [float(rng.integers(1, 4)) for _ in range(n)]
    return build_layout(
        n, n, m, m,
        fwd_a, [2 * x for x in fwd_a],
        fwd_b, [2 * x for x in fwd_b],
        act_a=act_a,
        act_b=act_b,
    )


@pytest.mark.slow
def test_memory_pass_on_random_instances():
    rng = np.random.default_rng(606)
    params = AnnealParams(alpha=0.95, epsilon=1e-3)
    greedy_not_lower = 0
    for _ in range(100):
        layout = random_memory_layout(rng)
        greedy = greedy_schedule(layout)
        best, _ = multi_seed_search(layout, params, 2, n_jobs=1)
        compact, _ = memory_pass(best, layout, params)
        assert check_valid(compact, layout)
        assert compact.energy <= best.energy
        actual_peak = max(peak_memory(compact, layout))
        assert actual_peak <= max(peak_memory(best, layout))
        greedy_not_lower += max(peak_memory(greedy, layout)) >= actual_peak
    assert greedy_not_lower >= 90


@pytest.mark.slow
def test_doubling_chains_never_worse():
    layout = build_layout(4, 2, 4, 2, [2.0, 1.0, 1.0, 2.0], [4.0, 2.0, 2.0, 4.0], [1.0] * 2, [2.0] * 2)
    params = AnnealParams(alpha=0.95, epsilon=1e-3)
    thirty_two, small = multi_seed_search(layout, params, 32, n_jobs=1)
    sixty_four, large = multi_seed_search(layout, params, 64, n_jobs=1)
    assert sixty_four.energy <= thirty_two.energy
    assert [c.energy for c in large.chains[:32]] == [c.energy for c in small.chains]
