# src/annealer/construct.py
# Constructive starting points for the search: priority-rule schedules that put
# every subtask into the earliest idle gap of its stage, and the
# forward-backward justification that compacts an existing schedule.

import bisect
import heapq
import logging
from typing import Callable, Dict, List, Sequence, Tuple

from src.fusion.layout import MODELS, FusionLayout
from src.fusion.schedule import FusedSchedule, evaluate, check_valid
from src.pipeline.baseline import schedule_1f1b
from src.annealer.greedy import greedy_schedule

logger = logging.getLogger(__name__)

PriorityKey = Callable[[int], tuple]


class _Lane:
    """Sorted, disjoint busy intervals of one stage."""

    def __init__(self, tol: float):
        self.starts: List[float] = []
        self.ends: List[float] = []
        self.tol = tol

    def earliest(self, ready: float, duration: float) -> float:
        t = ready
        i = bisect.bisect_right(self.ends, t)
        while i < len(self.starts) and t + duration > self.starts[i] + self.tol:
            t = max(t, self.ends[i])
            i += 1
        return t

    def latest(self, due: float, duration: float) -> float:
        """Latest start whose interval ends by `due`."""
        t = due
        i = bisect.bisect_left(self.starts, t) - 1
        while i >= 0 and t - duration < self.ends[i] - self.tol:
            t = min(t, self.starts[i])
            i -= 1
        return t - duration

    def book(self, start: float, end: float):
        i = bisect.bisect_left(self.starts, start)
        self.starts.insert(i, start)
        self.ends.insert(i, end)


def _dependents(layout: FusionLayout) -> List[List[int]]:
    dependents: List[List[int]] = [[] for _ in range(layout.num_subtasks)]
    for uid, dep in enumerate(layout.inter_dep):
        if dep is not None:
            dependents[dep].append(uid)
    return dependents


def _tolerance(layout: FusionLayout) -> float:
    return 1e-9 * min((t.latency for t in layout.subtasks), default=1.0)


def _hop(layout: FusionLayout, a: int, b: int) -> float:
    if layout.comm and layout.subtasks[a].stage != layout.subtasks[b].stage:
        return layout.comm
    return 0.0


def _from_starts(layout: FusionLayout, start: Sequence[float]) -> FusedSchedule:
    rows = tuple(
        tuple(layout.subtasks[u] for u in sorted(members, key=lambda u: (start[u], u)))
        for members in layout.members
    )
    return evaluate(FusedSchedule(rows), layout)


def priority_schedule(layout: FusionLayout, key: PriorityKey) -> FusedSchedule:
    """
    Serial schedule generation. Subtasks become eligible once their data
    dependency is placed; the eligible subtask with the smallest key goes into
    the earliest gap of its stage that is long enough, which may lie before
    subtasks placed earlier. Activation capacity is not enforced.
    """
    total = layout.num_subtasks
    dependents = _dependents(layout)
    tol = _tolerance(layout)
    lanes = [_Lane(tol) for _ in range(layout.N)]
    start = [0.0] * total
    finish = [0.0] * total
    heap = [(key(u), u) for u, dep in enumerate(layout.inter_dep) if dep is None]
    heapq.heapify(heap)
    while heap:
        _, u = heapq.heappop(heap)
        t = layout.subtasks[u]
        dep = layout.inter_dep[u]
        ready = 0.0 if dep is None else finish[dep] + _hop(layout, dep, u)
        start[u] = lanes[t.stage].earliest(ready, t.latency)
        finish[u] = start[u] + t.latency
        lanes[t.stage].book(start[u], finish[u])
        for v in dependents[u]:
            heapq.heappush(heap, (key(v), v))
    return _from_starts(layout, start)


def justify(schedule: FusedSchedule, layout: FusionLayout) -> FusedSchedule:
    """
    One forward-backward improvement pass.

    Subtasks are pushed as late as possible below the current makespan in
    decreasing order of finish time, then pulled as early as possible in
    increasing order of those late start times. The input is returned when the
    pass does not shorten it or breaks the activation capacity.
    """
    schedule = schedule if schedule.timeline is not None else evaluate(schedule, layout)
    tl = schedule.timeline
    total = layout.num_subtasks
    subtasks = layout.subtasks
    dependents = _dependents(layout)
    tol = _tolerance(layout)

    lanes = [_Lane(tol) for _ in range(layout.N)]
    late = [0.0] * total
    for u in sorted(range(total), key=lambda v: (-tl.end[v], -tl.start[v], v)):
        t = subtasks[u]
        due = tl.makespan
        for v in dependents[u]:
            due = min(due, late[v] - _hop(layout, u, v))
        late[u] = lanes[t.stage].latest(due, t.latency)
        lanes[t.stage].book(late[u], late[u] + t.latency)

    lanes = [_Lane(tol) for _ in range(layout.N)]
    start = [0.0] * total
    finish = [0.0] * total
    for u in sorted(range(total), key=lambda v: (late[v], v)):
        t = subtasks[u]
        dep = layout.inter_dep[u]
        ready = 0.0 if dep is None else finish[dep] + _hop(layout, dep, u)
        start[u] = lanes[t.stage].earliest(ready, t.latency)
        finish[u] = start[u] + t.latency
        lanes[t.stage].book(start[u], finish[u])

    candidate = _from_starts(layout, start)
    if candidate.energy < schedule.energy and check_valid(candidate, layout):
        return candidate
    return schedule


def compact(schedule: FusedSchedule, layout: FusionLayout, rounds: int = 4) -> FusedSchedule:
    """Repeat justify until it stops shortening the schedule."""
    for _ in range(rounds):
        shorter = justify(schedule, layout)
        if shorter is schedule:
            break
        logger.debug("justified %.6g -> %.6g", schedule.energy, shorter.energy)
        schedule = shorter
    return schedule


def standalone_starts(layout: FusionLayout) -> List[float]:
    """Start time of every subtask in its own model's standalone 1F1B."""
    starts = [0.0] * layout.num_subtasks
    for model in MODELS[: 2 if layout.has_b else 1]:
        i = layout.model_index(model)
        trace = schedule_1f1b(
            layout.stages_of(model),
            layout.microbatches_of(model),
            layout.fwd_latency[i],
            layout.bwd_latency[i],
            layout.comm,
        )
        groups = layout.K1 if model == 'A' else layout.K2
        for e in trace.entries:
            for g in range(groups):
                starts[layout.by_key[(model, g, e.microbatch, e.stage, e.direction)].uid] = e.start
    return starts


def remaining_chain(layout: FusionLayout) -> List[float]:
    """Latency of each subtask plus everything after it in its micro-batch."""
    tail = [0.0] * layout.num_subtasks
    dependents = _dependents(layout)
    for root, dep in enumerate(layout.inter_dep):
        if dep is not None:
            continue
        # every micro-batch is a single chain: forwards down, backwards up
        chain = [root]
        while dependents[chain[-1]]:
            chain.append(dependents[chain[-1]][0])
        after = None
        for u in reversed(chain):
            tail[u] = layout.subtasks[u].latency
            if after is not None:
                tail[u] += _hop(layout, u, after) + tail[after]
            after = u
    return tail


def priority_rules(layout: FusionLayout) -> Dict[str, PriorityKey]:
    """Named keys for priority_schedule, smallest key first."""
    subtasks = layout.subtasks
    starts = standalone_starts(layout)
    tail = remaining_chain(layout)
    larger = 'A' if layout.params[0] >= layout.params[1] else 'B'
    span = {'A': 0.0, 'B': 0.0}
    for u, t in enumerate(subtasks):
        span[t.model] = max(span[t.model], starts[u] + t.latency)
    # the shorter model's 1F1B shifted so that both end together
    shift = {m: max(span.values()) - span[m] for m in span}

    return {
        'one_f_one_b': lambda u: (starts[u], subtasks[u].model, u),
        'larger_first': lambda u: (subtasks[u].model != larger, starts[u], u),
        'smaller_first': lambda u: (subtasks[u].model == larger, starts[u], u),
        'aligned_end': lambda u: (starts[u] + shift[subtasks[u].model], u),
        'longest_tail': lambda u: (-tail[u], starts[u], u),
    }


def seed_schedules(layout: FusionLayout) -> List[FusedSchedule]:
    """
    Distinct valid starting schedules: the greedy schedule first, then every
    priority rule compacted by justify. Rule schedules that break the
    activation capacity are dropped.
    """
    greedy = greedy_schedule(layout)
    seeds = [greedy]
    seen = {greedy.uid_rows()}
    candidates: List[Tuple[str, FusedSchedule]] = [('greedy_justified', greedy)]
    for name, key in priority_rules(layout).items():
        candidates.append((name, priority_schedule(layout, key)))
    for name, schedule in candidates:
        if not check_valid(schedule, layout):
            logger.debug("rule %s breaks the activation capacity", name)
            continue
        schedule = compact(schedule, layout)
        rows = schedule.uid_rows()
        if rows in seen:
            continue
        seen.add(rows)
        seeds.append(schedule)
        logger.debug("rule %s energy %.6g", name, schedule.energy)
    logger.info(
        "%d seed schedules, energies %s",
        len(seeds),
        ", ".join(f"{s.energy:.6g}" for s in seeds),
    )
    return seeds
