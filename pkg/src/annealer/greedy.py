# src/annealer/greedy.py
# Event-driven list scheduling used as the annealing starting point.

import heapq
import logging
from typing import List

from src.core.errors import InfeasibleError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import FusedSchedule, evaluate, check_valid, serial_schedule

logger = logging.getLogger(__name__)


def _priority(layout: FusionLayout):
    # larger model first, then smaller micro-batch, then backward before forward
    larger = 'A' if layout.params[0] >= layout.params[1] else 'B'

    def key(uid: int):
        t = layout.subtasks[uid]
        return (0 if t.model == larger else 1, t.microbatch, 0 if not t.is_forward else 1, uid)

    return key


def list_schedule(layout: FusionLayout) -> FusedSchedule:
    """
    Dispatch ready subtasks whenever a stage goes idle.

    A forward of a chunk at logical stage l of a P-stage pipeline is only
    dispatched while fewer than P - l forwards of that chunk are outstanding on
    the stage, and while the stage's activation stays within capacity.
    """
    total = layout.num_subtasks
    priority = _priority(layout)
    subtasks = layout.subtasks
    finish = [None] * total
    arrival = [None] * total
    dependents: List[List[int]] = [[] for _ in range(total)]
    for uid, dep in enumerate(layout.inter_dep):
        if dep is None:
            arrival[uid] = 0.0
        else:
            dependents[dep].append(uid)

    pending = [set(row) for row in layout.members]
    outstanding = [{'A': 0, 'B': 0} for _ in range(layout.N)]
    memory = [0.0] * layout.N
    busy = [False] * layout.N
    rows: List[List[int]] = [[] for _ in range(layout.N)]
    events = [(0.0, 0, -1, -1)]
    seq = 1
    done = 0

    def dispatchable(p: int, uid: int, now: float) -> bool:
        if arrival[uid] is None or arrival[uid] > now:
            return False
        t = subtasks[uid]
        if not t.is_forward:
            return True
        limit = layout.stages_of(t.model) - t.stage_logical
        if outstanding[p][t.model] >= limit:
            return False
        return memory[p] + layout.activation[uid] <= layout.capacity

    while events:
        now = events[0][0]
        while events and events[0][0] == now:
            _, _, p, uid = heapq.heappop(events)
            if uid < 0:
                continue
            busy[p] = False
            done += 1
            t = subtasks[uid]
            if not t.is_forward:
                outstanding[p][t.model] -= 1
                memory[p] -= layout.activation[uid]
            for nxt in dependents[uid]:
                ready = finish[uid]
                if layout.comm and subtasks[nxt].stage != p:
                    ready += layout.comm
                    heapq.heappush(events, (ready, seq, -1, -1))
                    seq += 1
                arrival[nxt] = ready
        for p in range(layout.N):
            if busy[p]:
                continue
            candidates = [u for u in pending[p] if dispatchable(p, u, now)]
            if not candidates:
                continue
            uid = min(candidates, key=priority)
            pending[p].discard(uid)
            t = subtasks[uid]
            if t.is_forward:
                outstanding[p][t.model] += 1
                memory[p] += layout.activation[uid]
            busy[p] = True
            finish[uid] = now + t.latency
            rows[p].append(uid)
            heapq.heappush(events, (finish[uid], seq, p, uid))
            seq += 1

    if done != total:
        raise InfeasibleError(
            f"list scheduling stalled with {total - done} subtasks left; "
            f"activation capacity {layout.capacity:.6g} is too small",
            code="greedy.stalled",
        )
    schedule = FusedSchedule(tuple(tuple(subtasks[u] for u in row) for row in rows))
    return evaluate(schedule, layout)


def greedy_schedule(layout: FusionLayout) -> FusedSchedule:
    """
    Greedy list schedule, falling back to the serial embedding (A's 1F1B then
    B's 1F1B) if the list schedule is slower.
    """
    serial = serial_schedule(layout)
    try:
        listed = list_schedule(layout)
    except InfeasibleError:
        if not check_valid(serial, layout):
            raise
        logger.warning("list scheduling stalled, using the serial embedding")
        return serial
    chosen = listed if listed.energy <= serial.energy else serial
    logger.info(
        "greedy energy %.6g (list %.6g, serial embedding %.6g)",
        chosen.energy,
        listed.energy,
        serial.energy,
    )
    return chosen
