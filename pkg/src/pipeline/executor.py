# src/pipeline/executor.py
# Event-driven replay of fixed per-stage orderings. Used to build baseline
# traces and, independently of the memoized recursion in src.fusion, as the
# reference evaluator for fused schedules.

import heapq
import logging
from typing import Any, Dict, Tuple, Hashable, Callable, Optional, Sequence

from src.core.errors import ScheduleError

logger = logging.getLogger(__name__)

Key = Hashable


def replay(
    orders: Sequence[Sequence[Key]],
    duration: Callable[[Key], float],
    depends_on: Callable[[Key], Optional[Key]],
    comm: float = 0.0,
) -> Dict[Key, Tuple[Any, Any]]:
    """
    Replay per-stage orderings as a discrete-event simulation.

    A subtask starts once its stage finished the previous entry of the row and
    its cross-row dependency (if any) completed; `comm` is added to edges whose
    endpoints sit on different stages.

    Args:
        orders: One ordered sequence of keys per stage
        duration: Latency of a key
        depends_on: The single data dependency of a key, or None
        comm: Communication time on cross-stage edges
    Returns:
        Mapping key -> (start, end)
    Raises:
        ScheduleError: Unknown dependency, duplicate key or deadlock
    """
    stage_of = {}
    for stage, row in enumerate(orders):
        for key in row:
            if key in stage_of:
                raise ScheduleError(f"duplicate subtask {key!r}", code="schedule.duplicate")
            stage_of[key] = stage

    pointer = [0] * len(orders)
    stage_free = [0] * len(orders)
    busy = [False] * len(orders)
    finished: Dict[Key, Tuple[Any, Any]] = {}
    events = []
    seq = 0

    def try_dispatch(stage: int):
        nonlocal seq
        if busy[stage] or pointer[stage] >= len(orders[stage]):
            return
        key = orders[stage][pointer[stage]]
        dep = depends_on(key)
        ready = stage_free[stage]
        if dep is not None:
            if dep not in stage_of:
                raise ScheduleError(
                    f"dependency {dep!r} of {key!r} is not scheduled",
                    code="schedule.missing",
                )
            if dep not in finished:
                return
            arrival = finished[dep][1]
            if comm and stage_of[dep] != stage:
                arrival = arrival + comm
            ready = max(ready, arrival)
        end = ready + duration(key)
        busy[stage] = True
        heapq.heappush(events, (end, seq, stage, key, ready))
        seq += 1

    for stage in range(len(orders)):
        try_dispatch(stage)

    while events:
        end, _, stage, key, start = heapq.heappop(events)
        finished[key] = (start, end)
        stage_free[stage] = end
        busy[stage] = False
        pointer[stage] += 1
        for other in range(len(orders)):
            try_dispatch(other)

    if len(finished) != len(stage_of):
        stuck = [
            orders[s][pointer[s]] for s in range(len(orders)) if pointer[s] < len(orders[s])
        ]
        raise ScheduleError(
            f"deadlock: {len(stage_of) - len(finished)} subtasks never ready, "
            f"blocked heads {stuck[:4]!r}",
            code="schedule.deadlock",
        )
    logger.debug("replayed %d subtasks on %d stages", len(finished), len(orders))
    return finished
