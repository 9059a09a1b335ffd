# src/annealer/oracle.py
# Exhaustive branch-and-bound search over row orderings of tiny layouts.

import logging
from dataclasses import dataclass

from src.core.errors import OracleLimitError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import FusedSchedule, evaluate
from src.annealer.greedy import greedy_schedule

logger = logging.getLogger(__name__)

MAX_SUBTASKS = 16


@dataclass
class OracleResult:
    energy: float
    schedule: FusedSchedule
    nodes: int


def exhaustive_oracle(layout: FusionLayout, max_subtasks: int = MAX_SUBTASKS) -> OracleResult:
    """
    Optimal makespan by enumerating every valid combination of row orders.

    Each combination has a unique as-early-as-possible timeline, so it is
    generated exactly once as the dispatch sequence sorted by (start, stage).
    Branches are cut on dependency readiness, activation capacity and a
    remaining-work bound against the best schedule found so far, seeded with
    the greedy schedule.
    """
    total = layout.num_subtasks
    if total > max_subtasks:
        raise OracleLimitError(
            f"exhaustive search limited to {max_subtasks} subtasks, layout has {total}",
            code="oracle.too_large",
        )
    subtasks = layout.subtasks
    greedy = greedy_schedule(layout)
    best = {'energy': greedy.energy, 'rows': greedy.uid_rows()}

    finish = [None] * total
    free = [0.0] * layout.N
    remaining = [layout.total_work(p) for p in range(layout.N)]
    pending = [list(row) for row in layout.members]
    memory = [0.0] * layout.N
    rows = [[] for _ in range(layout.N)]
    nodes = 0

    def start_of(uid: int, p: int):
        dep = layout.inter_dep[uid]
        ready = free[p]
        if dep is not None:
            if finish[dep] is None:
                return None
            arrival = finish[dep]
            if layout.comm and subtasks[dep].stage != p:
                arrival += layout.comm
            ready = max(ready, arrival)
        return ready

    def search(placed: int, last: tuple, makespan: float):
        nonlocal nodes
        nodes += 1
        if placed == total:
            if makespan < best['energy']:
                best['energy'] = makespan
                best['rows'] = tuple(tuple(r) for r in rows)
            return
        bound = makespan
        for p in range(layout.N):
            if pending[p]:
                bound = max(bound, max(free[p], last[0]) + remaining[p])
        if bound >= best['energy']:
            return
        for p in range(layout.N):
            for uid in list(pending[p]):
                start = start_of(uid, p)
                if start is None or (start, p) <= last:
                    continue
                t = subtasks[uid]
                act = layout.activation[uid]
                if t.is_forward and memory[p] + act > layout.capacity:
                    continue
                end = start + t.latency
                saved = (free[p], remaining[p], memory[p])
                pending[p].remove(uid)
                rows[p].append(uid)
                finish[uid] = end
                free[p] = end
                remaining[p] -= t.latency
                memory[p] += act if t.is_forward else -act
                search(placed + 1, (start, p), max(makespan, end))
                free[p], remaining[p], memory[p] = saved
                finish[uid] = None
                rows[p].pop()
                pending[p].append(uid)
                pending[p].sort()

    search(0, (-1.0, -1), 0.0)
    schedule = FusedSchedule(tuple(tuple(subtasks[u] for u in row) for row in best['rows']))
    schedule = evaluate(schedule, layout)
    logger.info("oracle optimum %.6g after %d nodes", schedule.energy, nodes)
    return OracleResult(schedule.energy, schedule, nodes)
