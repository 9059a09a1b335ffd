# src/fusion/schedule.py
# Fused schedule matrix, validity constraints, memoized makespan evaluation and
# per-stage activation accounting.

import logging
from collections import deque
from dataclasses import field, replace, dataclass
from typing import List, Tuple, Optional, Sequence

from src.core.errors import ScheduleError
from src.fusion.layout import Subtask, FusionLayout
from src.pipeline.baseline import makespan_1f1b, one_f_one_b_order
from src.pipeline.executor import replay

logger = logging.getLogger(__name__)

UNVISITED, ON_STACK, DONE = 0, 1, 2


@dataclass(frozen=True)
class Timeline:
    start: Tuple[float, ...]
    end: Tuple[float, ...]
    makespan: float


@dataclass(frozen=True)
class FusedSchedule:
    """N ordered rows of subtasks, optionally with evaluated start/end times."""

    rows: Tuple[Tuple[Subtask, ...], ...]
    timeline: Optional[Timeline] = field(default=None, compare=False)

    @property
    def energy(self) -> float:
        if self.timeline is None:
            raise ScheduleError("schedule has not been evaluated", code="schedule.unevaluated")
        return self.timeline.makespan

    @property
    def num_stages(self) -> int:
        return len(self.rows)

    def uid_rows(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(t.uid for t in row) for row in self.rows)

    def swapped(self, stage: int, position: int) -> 'FusedSchedule':
        row = list(self.rows[stage])
        row[position], row[position + 1] = row[position + 1], row[position]
        rows = self.rows[:stage] + (tuple(row),) + self.rows[stage + 1:]
        return FusedSchedule(rows)

    def moved(self, stage: int, source: int, target: int) -> 'FusedSchedule':
        """Take the subtask at `source` out of the row and reinsert it at `target`."""
        row = list(self.rows[stage])
        row.insert(target, row.pop(source))
        rows = self.rows[:stage] + (tuple(row),) + self.rows[stage + 1:]
        return FusedSchedule(rows)

    def with_timeline(self, timeline: Timeline) -> 'FusedSchedule':
        return replace(self, timeline=timeline)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    kind: str = 'ok'
    stage: int = -1
    position: int = -1
    detail: str = ''

    def __bool__(self):
        return self.ok


def _violation(kind, stage=-1, position=-1, detail=''):
    return Verdict(False, kind, stage, position, detail)


def _row_predecessors(rows: Sequence[Sequence[int]], total: int) -> List[Optional[int]]:
    pred: List[Optional[int]] = [None] * total
    seen = [False] * total
    for row in rows:
        prev = None
        for uid in row:
            if seen[uid]:
                raise ScheduleError(f"subtask {uid} appears twice", code="schedule.malformed")
            seen[uid] = True
            pred[uid] = prev
            prev = uid
    if not all(seen):
        raise ScheduleError(
            f"{seen.count(False)} subtasks missing from the schedule", code="schedule.malformed"
        )
    return pred


def evaluate_rows(rows: Sequence[Sequence[int]], layout: FusionLayout) -> Timeline:
    """
    Memoized finish-time recursion over uid rows.

    finish(u) = max(finish(inter-stage dependency) + comm, finish(row
    predecessor)) + latency(u). Evaluated with an explicit stack so that each
    subtask is computed once; meeting a subtask that is still on the stack
    means the ordering contains a cycle.
    """
    total = layout.num_subtasks
    pred = _row_predecessors(rows, total)
    inter = layout.inter_dep
    subtasks = layout.subtasks
    comm = layout.comm
    state = [UNVISITED] * total
    start = [0.0] * total
    finish = [0.0] * total

    for root in range(total):
        if state[root] == DONE:
            continue
        stack = [root]
        state[root] = ON_STACK
        while stack:
            u = stack[-1]
            pending = None
            for dep in (inter[u], pred[u]):
                if dep is None or state[dep] == DONE:
                    continue
                if state[dep] == ON_STACK:
                    raise ScheduleError(
                        f"dependency cycle through {subtasks[u]!r}", code="schedule.deadlock"
                    )
                pending = dep
                break
            if pending is not None:
                state[pending] = ON_STACK
                stack.append(pending)
                continue
            ready = 0.0
            dep = inter[u]
            if dep is not None:
                ready = finish[dep]
                if comm and subtasks[dep].stage != subtasks[u].stage:
                    ready += comm
            if pred[u] is not None and finish[pred[u]] > ready:
                ready = finish[pred[u]]
            start[u] = ready
            finish[u] = ready + subtasks[u].latency
            state[u] = DONE
            stack.pop()
    return Timeline(tuple(start), tuple(finish), max(finish, default=0.0))


def evaluate(schedule: FusedSchedule, layout: FusionLayout) -> FusedSchedule:
    return schedule.with_timeline(evaluate_rows(schedule.uid_rows(), layout))


def compute_energy(schedule: FusedSchedule, layout: FusionLayout) -> float:
    """Makespan of the schedule; raises ScheduleError on a cyclic ordering."""
    return evaluate_rows(schedule.uid_rows(), layout).makespan


def critical_path(schedule: FusedSchedule, layout: FusionLayout) -> List[int]:
    """
    Uids of one chain of back-to-back subtasks ending at the makespan, in
    execution order. Where a subtask waited on both its row predecessor and its
    data dependency the row edge is followed.
    """
    if schedule.timeline is None:
        raise ScheduleError("critical path needs an evaluated schedule", code="schedule.unevaluated")
    tl = schedule.timeline
    pred = _row_predecessors(schedule.uid_rows(), layout.num_subtasks)
    u = max(range(layout.num_subtasks), key=lambda v: (tl.end[v], -v), default=None)
    path = []
    while u is not None:
        path.append(u)
        p, dep = pred[u], layout.inter_dep[u]
        if p is not None and tl.end[p] == tl.start[u]:
            u = p
        elif dep is not None:
            arrival = tl.end[dep]
            if layout.comm and layout.subtasks[dep].stage != layout.subtasks[u].stage:
                arrival += layout.comm
            u = dep if arrival == tl.start[u] else None
        else:
            u = None
    path.reverse()
    return path


def replay_energy(schedule: FusedSchedule, layout: FusionLayout) -> float:
    """Makespan from the heap-based event replay, independent of compute_energy."""
    inter = layout.inter_dep
    subtasks = layout.subtasks
    times = replay(
        schedule.uid_rows(),
        duration=lambda u: subtasks[u].latency,
        depends_on=lambda u: inter[u],
        comm=layout.comm,
    )
    return max((end for _, end in times.values()), default=0.0)


def check_valid(schedule: FusedSchedule, layout: FusionLayout) -> Verdict:
    """
    Check the schedule against the layout.

    Violations are reported in this order: malformed rows, same-stage
    dependency orientation, deadlock in the combined order/data graph, and
    per-stage activation capacity.
    """
    rows = schedule.uid_rows()
    if len(rows) != layout.N:
        return _violation('malformed', detail=f"{len(rows)} rows for {layout.N} stages")
    seen = set()
    for p, row in enumerate(rows):
        expected = set(layout.members[p])
        for j, uid in enumerate(row):
            if uid in seen:
                return _violation('malformed', p, j, f"duplicate {layout.subtasks[uid]!r}")
            if uid not in expected:
                return _violation('malformed', p, j, f"{layout.subtasks[uid]!r} belongs to another stage")
            seen.add(uid)
        if len(row) != len(expected):
            return _violation('malformed', p, len(row), f"{len(expected) - len(row)} subtasks missing")

    position = [0] * layout.num_subtasks
    for row in rows:
        for j, uid in enumerate(row):
            position[uid] = j
    for uid, dep in enumerate(layout.inter_dep):
        t = layout.subtasks[uid]
        if dep is not None and layout.subtasks[dep].stage == t.stage and position[dep] > position[uid]:
            return _violation(
                'dependency', t.stage, position[uid], f"{t!r} ordered before its forward"
            )

    # Kahn topological sort over row edges and data edges
    indegree = [0] * layout.num_subtasks
    successors: List[List[int]] = [[] for _ in range(layout.num_subtasks)]
    for row in rows:
        for a, b in zip(row, row[1:]):
            successors[a].append(b)
            indegree[b] += 1
    for uid, dep in enumerate(layout.inter_dep):
        if dep is not None:
            successors[dep].append(uid)
            indegree[uid] += 1
    queue = deque(u for u in range(layout.num_subtasks) if indegree[u] == 0)
    visited = 0
    while queue:
        u = queue.popleft()
        visited += 1
        for v in successors[u]:
            indegree[v] -= 1
            if not indegree[v]:
                queue.append(v)
    if visited != layout.num_subtasks:
        blocked = min(u for u in range(layout.num_subtasks) if indegree[u] > 0)
        t = layout.subtasks[blocked]
        return _violation('deadlock', t.stage, position[blocked], f"cycle reaches {t!r}")

    for p, row in enumerate(rows):
        level = 0.0
        for j, uid in enumerate(row):
            t = layout.subtasks[uid]
            if t.is_forward:
                level += layout.activation[uid]
                if level > layout.capacity:
                    return _violation(
                        'memory', p, j, f"{level:.6g} bytes exceed capacity {layout.capacity:.6g}"
                    )
            else:
                level -= layout.activation[uid]
    return Verdict(True)


def row_peak(row: Sequence[int], layout: FusionLayout) -> float:
    level = peak = 0.0
    for uid in row:
        if layout.subtasks[uid].is_forward:
            level += layout.activation[uid]
            peak = max(peak, level)
        else:
            level -= layout.activation[uid]
    return peak


def peak_memory(schedule: FusedSchedule, layout: FusionLayout) -> List[float]:
    """Per-stage peak of outstanding activation bytes."""
    return [row_peak(row, layout) for row in schedule.uid_rows()]


def memory_profile(schedule: FusedSchedule, layout: FusionLayout) -> List[List[Tuple[float, float]]]:
    """
    Per-stage staircase of (time, bytes) points over the evaluated timeline:
    activation is charged at forward start and released at backward end.
    """
    if schedule.timeline is None:
        raise ScheduleError("memory profile needs an evaluated schedule", code="schedule.unevaluated")
    tl = schedule.timeline
    profile = []
    for row in schedule.rows:
        level = 0.0
        points = [(0.0, 0.0)]
        for t in row:
            if t.is_forward:
                level += layout.activation[t.uid]
                points.append((tl.start[t.uid], level))
            else:
                level -= layout.activation[t.uid]
                points.append((tl.end[t.uid], level))
        profile.append(points)
    return profile


def _model_order(layout: FusionLayout, model: str, stage: int) -> List[Subtask]:
    for chunk in layout.placement[stage]:
        if chunk.model == model:
            order = one_f_one_b_order(
                layout.stages_of(model), layout.microbatches_of(model), chunk.stage_logical
            )
            return [
                layout.by_key[(model, chunk.group, m, chunk.stage_logical, d)] for d, m in order
            ]
    return []


def serial_schedule(layout: FusionLayout) -> FusedSchedule:
    """Model A's 1F1B followed by model B's 1F1B on every stage."""
    rows = tuple(
        tuple(_model_order(layout, 'A', p) + _model_order(layout, 'B', p))
        for p in range(layout.N)
    )
    schedule = evaluate(FusedSchedule(rows), layout)
    logger.debug("serial embedding energy %.6g", schedule.energy)
    return schedule


def serial_makespan(layout: FusionLayout) -> float:
    """Standalone 1F1B of model A plus standalone 1F1B of model B."""
    total = makespan_1f1b(
        layout.N1, layout.M1, layout.fwd_latency[0], layout.bwd_latency[0], layout.comm
    )
    if layout.has_b:
        total += makespan_1f1b(
            layout.N2, layout.M2, layout.fwd_latency[1], layout.bwd_latency[1], layout.comm
        )
    return total


def standalone_makespan(layout: FusionLayout, model: str) -> float:
    i = layout.model_index(model)
    return makespan_1f1b(
        layout.stages_of(model),
        layout.microbatches_of(model),
        layout.fwd_latency[i],
        layout.bwd_latency[i],
        layout.comm,
    )


def serial_peak_memory(layout: FusionLayout) -> List[float]:
    return peak_memory(serial_schedule(layout), layout)


def rebind(schedule: FusedSchedule, layout: FusionLayout) -> FusedSchedule:
    """Map the same ordering onto a layout of identical shape and re-evaluate."""
    try:
        rows = tuple(tuple(layout.by_key[t.key] for t in row) for row in schedule.rows)
    except KeyError as exc:
        raise ScheduleError(f"subtask {exc.args[0]} absent from target layout", code="schedule.rebind") from exc
    return evaluate(FusedSchedule(rows), layout)


def from_keys(rows: Sequence[Sequence[tuple]], layout: FusionLayout) -> FusedSchedule:
    try:
        return FusedSchedule(tuple(tuple(layout.by_key[k] for k in row) for row in rows))
    except KeyError as exc:
        raise ScheduleError(f"unknown subtask {exc.args[0]}", code="schedule.malformed") from exc

