"""Unit tests for the constructive starting schedules and justification."""

import numpy as np
import pytest

from src.fusion.layout import build_layout
from src.fusion.schedule import check_valid, compute_energy, serial_makespan
from src.pipeline.baseline import makespan_1f1b
from src.annealer.bounds import lower_bound
from src.annealer.greedy import greedy_schedule
from src.annealer.construct import (
    compact,
    justify,
    priority_rules,
    seed_schedules,
    remaining_chain,
    priority_schedule,
    standalone_starts,
)


def symmetric_layout():
    return build_layout(4, 4, 4, 4, [1.0] * 4, [2.0] * 4, [1.0] * 4, [2.0] * 4)


def uneven_layout():
    # 2-stage A beside a 4-stage B: two groups of A
    return build_layout(2, 4, 2, 4, [2.0, 1.0], [4.0, 2.0], [1.0] * 4, [2.0] * 4)


def test_standalone_starts_follow_1f1b():
    layout = build_layout(4, 0, 6, 0, [1.0] * 4, [2.0] * 4)
    starts = standalone_starts(layout)
    ends = [s + t.latency for s, t in zip(starts, layout.subtasks)]
    assert max(ends) == pytest.approx(makespan_1f1b(4, 6, [1.0] * 4, [2.0] * 4))
    assert min(starts) == 0.0


def test_remaining_chain_of_a_micro_batch():
    layout = build_layout(2, 0, 1, 0, [1.0, 1.0], [2.0, 2.0])
    tail = remaining_chain(layout)
    # fwd 0, fwd 1, bwd 1, bwd 0
    assert max(tail) == pytest.approx(6.0)
    assert sorted(tail) == pytest.approx([2.0, 4.0, 5.0, 6.0])


def test_every_priority_rule_yields_a_valid_schedule():
    for layout in (symmetric_layout(), uneven_layout()):
        for name, key in priority_rules(layout).items():
            schedule = priority_schedule(layout, key)
            assert check_valid(schedule, layout), name
            assert schedule.energy == compute_energy(schedule, layout)
            assert schedule.energy >= lower_bound(layout) - 1e-9


def test_justify_never_lengthens():
    rng = np.random.default_rng(9)
    layout = uneven_layout()
    for _ in range(20):
        order = rng.permutation(layout.num_subtasks)
        schedule = priority_schedule(layout, lambda u: (order[u],))
        actual = justify(schedule, layout)
        assert check_valid(actual, layout)
        assert actual.energy <= schedule.energy
        assert compact(schedule, layout).energy <= actual.energy


def test_seed_schedules_start_with_greedy():
    layout = uneven_layout()
    seeds = seed_schedules(layout)
    assert seeds[0].uid_rows() == greedy_schedule(layout).uid_rows()
    assert len({s.uid_rows() for s in seeds}) == len(seeds)
    for schedule in seeds:
        assert check_valid(schedule, layout)
        assert schedule.energy >= lower_bound(layout) - 1e-9
    assert seeds[0].energy <= serial_makespan(layout) + 1e-9


def test_seed_schedules_drop_capacity_breaking_rules():
    layout = build_layout(2, 2, 4, 4, [1.0] * 2, [2.0] * 2, [1.0] * 2, [2.0] * 2, capacity=2.0)
    for schedule in seed_schedules(layout):
        assert check_valid(schedule, layout)
