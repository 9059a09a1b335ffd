# src/annealer/anneal.py
# Simulated annealing over fused schedules: neighbor moves, makespan annealing
# and the second pass that lowers peak activation memory.

import math
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.core.errors import ConfigError, ScheduleError, NeighborFrozenError
from src.fusion.layout import FusionLayout
from src.fusion.schedule import (
    FusedSchedule,
    evaluate,
    row_peak,
    peak_memory,
    critical_path,
    evaluate_rows,
)
from src.annealer.construct import compact

logger = logging.getLogger(__name__)

Admissible = Callable[[FusedSchedule], bool]
Candidate = Tuple[Optional[FusedSchedule], int]

# weight of the mean stage peak next to the max in the memory energy
MEMORY_TIE_WEIGHT = 0.01


@dataclass(frozen=True)
class AnnealParams:
    """
    Cooling schedule and move mix.

    T starts at temperature_scale times the initial energy and is multiplied by
    alpha after every level until it falls to epsilon times its start. Each
    neighbor is a swap of two adjacent subtasks on the critical path with
    probability critical_rate, a shift of one subtask along its row with
    probability shift_rate, and otherwise a uniform adjacent swap.
    """

    alpha: float = 0.98
    epsilon: float = 1e-4
    swap_retry_limit: int = 1000
    rng_seed: int = 0
    neighbors_per_temperature: int = 1
    temperature_scale: float = 0.01
    critical_rate: float = 0.5
    shift_rate: float = 0.25

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}", code="config.alpha")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}", code="config.epsilon")
        if self.rng_seed < 0:
            raise ConfigError(f"rng_seed must be >= 0, got {self.rng_seed}", code="config.seed")
        if self.swap_retry_limit < 1 or self.neighbors_per_temperature < 1:
            raise ConfigError(
                "swap_retry_limit and neighbors_per_temperature must be >= 1",
                code="config.non_positive",
            )
        if self.temperature_scale <= 0:
            raise ConfigError(
                f"temperature_scale must be > 0, got {self.temperature_scale}",
                code="config.temperature",
            )
        rates = (self.critical_rate, self.shift_rate)
        if min(rates) < 0 or sum(rates) > 1:
            raise ConfigError(
                f"move rates must be >= 0 and sum to at most 1, got {rates}",
                code="config.move_rate",
            )

    @property
    def steps(self) -> int:
        """Temperature levels visited before T falls to epsilon * T0."""
        return max(0, math.ceil(math.log(self.epsilon) / math.log(self.alpha)))


def acceptance_probability(current: float, candidate: float, temperature: float) -> float:
    if candidate < current:
        return 1.0
    return math.exp((current - candidate) / temperature)


def _adjacent_swap(schedule: FusedSchedule, layout: FusionLayout, rng: np.random.Generator) -> Candidate:
    p = int(rng.integers(layout.N))
    row = schedule.rows[p]
    if len(row) < 2:
        return None, p
    j = int(rng.integers(len(row) - 1))
    if layout.inter_dep[row[j + 1].uid] == row[j].uid:
        return None, p
    return schedule.swapped(p, j), p


def _settle(
    candidate: FusedSchedule,
    stage: int,
    layout: FusionLayout,
    admissible: Optional[Admissible],
) -> Optional[FusedSchedule]:
    """Evaluate a candidate whose row `stage` changed, None when it is invalid."""
    if math.isfinite(layout.capacity):
        row = [t.uid for t in candidate.rows[stage]]
        if row_peak(row, layout) > layout.capacity:
            return None
    try:
        timeline = evaluate_rows(candidate.uid_rows(), layout)
    except ScheduleError as exc:
        if exc.code != "schedule.deadlock":
            raise
        return None
    neighbor = candidate.with_timeline(timeline)
    if admissible is not None and not admissible(neighbor):
        return None
    return neighbor


def compute_neighbor(
    schedule: FusedSchedule,
    layout: FusionLayout,
    rng: np.random.Generator,
    retry_limit: int = 1000,
    admissible: Optional[Admissible] = None,
) -> FusedSchedule:
    """
    Swap two adjacent subtasks of a random stage, retrying until the result is
    valid.

    Args:
        schedule: Valid schedule
        layout: Layout the schedule belongs to
        rng: Random generator, consumed deterministically
        retry_limit: Attempts before the state is declared frozen
        admissible: Optional extra filter on evaluated neighbors
    Returns:
        Evaluated neighbor schedule
    Raises:
        NeighborFrozenError: No valid neighbor within retry_limit attempts
    """
    for _ in range(retry_limit):
        candidate, p = _adjacent_swap(schedule, layout, rng)
        if candidate is None:
            continue
        neighbor = _settle(candidate, p, layout, admissible)
        if neighbor is not None:
            return neighbor
    raise NeighborFrozenError(
        f"no valid neighbor after {retry_limit} swap attempts", code="anneal.frozen"
    )


class NeighborSampler:
    """
    Draws valid neighbors with the move mix of AnnealParams.

    With relieve_memory both the critical and the shift share go to a targeted
    move instead: on the stage with the highest activation peak, a forward
    that is live at the peak is moved past the first backward that follows it.
    """

    def __init__(
        self,
        layout: FusionLayout,
        params: AnnealParams,
        rng: np.random.Generator,
        admissible: Optional[Admissible] = None,
        relieve_memory: bool = False,
    ):
        self.layout = layout
        self.params = params
        self.rng = rng
        self.admissible = admissible
        self.relieve_memory = relieve_memory
        self._pairs_of: Optional[FusedSchedule] = None
        self._pairs: List[Tuple[int, int]] = []

    def __call__(self, schedule: FusedSchedule) -> FusedSchedule:
        params = self.params
        for _ in range(params.swap_retry_limit):
            draw = self.rng.random()
            if self.relieve_memory and draw < params.critical_rate + params.shift_rate:
                candidate, p = self._relief_shift(schedule)
            elif draw < params.critical_rate:
                candidate, p = self._critical_swap(schedule)
            elif draw < params.critical_rate + params.shift_rate:
                candidate, p = self._shift(schedule)
            else:
                candidate, p = _adjacent_swap(schedule, self.layout, self.rng)
            if candidate is None:
                continue
            neighbor = _settle(candidate, p, self.layout, self.admissible)
            if neighbor is not None:
                return neighbor
        raise NeighborFrozenError(
            f"no valid neighbor after {params.swap_retry_limit} attempts", code="anneal.frozen"
        )

    def _critical_pairs(self, schedule: FusedSchedule) -> List[Tuple[int, int]]:
        if self._pairs_of is not schedule:
            layout = self.layout
            position = {}
            for p, row in enumerate(schedule.rows):
                for j, t in enumerate(row):
                    position[t.uid] = (p, j)
            path = critical_path(schedule, layout)
            pairs = []
            for a, b in zip(path, path[1:]):
                (pa, ja), (pb, jb) = position[a], position[b]
                if pa == pb and jb == ja + 1 and layout.inter_dep[b] != a:
                    pairs.append((pa, ja))
            self._pairs_of, self._pairs = schedule, pairs
        return self._pairs

    def _critical_swap(self, schedule: FusedSchedule) -> Candidate:
        pairs = self._critical_pairs(schedule)
        if not pairs:
            return _adjacent_swap(schedule, self.layout, self.rng)
        p, j = pairs[int(self.rng.integers(len(pairs)))]
        return schedule.swapped(p, j), p

    def _shift(self, schedule: FusedSchedule) -> Candidate:
        p = int(self.rng.integers(self.layout.N))
        row = schedule.rows[p]
        if len(row) < 2:
            return None, p
        i = int(self.rng.integers(len(row)))
        distance = int(self.rng.geometric(0.25))
        k = i + distance if self.rng.random() < 0.5 else i - distance
        k = min(max(k, 0), len(row) - 1)
        if k == i:
            return None, p
        return schedule.moved(p, i, k), p

    def _relief_shift(self, schedule: FusedSchedule) -> Candidate:
        layout = self.layout
        rows = schedule.uid_rows()
        peaks = [row_peak(row, layout) for row in rows]
        top = max(peaks)
        stages = [p for p, value in enumerate(peaks) if value == top]
        p = stages[int(self.rng.integers(len(stages)))]
        row = rows[p]
        level, at = 0.0, None
        for j, uid in enumerate(row):
            if layout.subtasks[uid].is_forward:
                level += layout.activation[uid]
                if level == top:
                    at = j
                    break
            else:
                level -= layout.activation[uid]
        if at is None:
            return None, p
        release = next((k for k in range(at + 1, len(row)) if not layout.subtasks[row[k]].is_forward), None)
        live = [j for j in range(at + 1) if layout.subtasks[row[j]].is_forward]
        if release is None or not live:
            return None, p
        i = live[int(self.rng.integers(len(live)))]
        return schedule.moved(p, i, release), p


def _peak(schedule: FusedSchedule, layout: FusionLayout) -> float:
    return max(peak_memory(schedule, layout), default=0.0)


def anneal(
    initial: FusedSchedule,
    layout: FusionLayout,
    params: AnnealParams = None,
    rng: np.random.Generator = None,
) -> FusedSchedule:
    """
    Minimize makespan starting from `initial`.

    Worse neighbors are accepted with probability exp((e_current -
    e_neighbor) / T). The best schedule seen, by makespan then peak memory, is
    compacted and returned.

    Raises:
        NeighborFrozenError: The state froze; the error carries the best
            schedule reached so far
    """
    params = params or AnnealParams()
    rng = rng if rng is not None else np.random.default_rng(params.rng_seed)
    sample = NeighborSampler(layout, params, rng)
    current = initial if initial.timeline is not None else evaluate(initial, layout)
    start_energy = current.energy
    best, best_key = current, (start_energy, _peak(current, layout))
    temperature = params.temperature_scale * start_energy
    stop = params.epsilon * temperature
    steps = 0
    while temperature > stop:
        for _ in range(params.neighbors_per_temperature):
            try:
                neighbor = sample(current)
            except NeighborFrozenError as exc:
                logger.debug("anneal seed=%d froze after %d steps", params.rng_seed, steps)
                exc.best = best
                raise
            if neighbor.energy <= best_key[0]:
                key = (neighbor.energy, _peak(neighbor, layout))
                if key < best_key:
                    best, best_key = neighbor, key
            p = acceptance_probability(current.energy, neighbor.energy, temperature)
            if p > rng.random():
                current = neighbor
        temperature *= params.alpha
        steps += 1
    best = compact(best, layout)
    logger.debug(
        "anneal seed=%d steps=%d energy %.6g -> %.6g",
        params.rng_seed,
        steps,
        start_energy,
        best.energy,
    )
    return best


def memory_energy(schedule: FusedSchedule, layout: FusionLayout) -> float:
    """Highest stage peak, with the mean stage peak as a small tie-break."""
    peaks = peak_memory(schedule, layout)
    if not peaks:
        return 0.0
    return max(peaks) + MEMORY_TIE_WEIGHT * sum(peaks) / len(peaks)


def optimize_memory(
    s_star: FusedSchedule,
    layout: FusionLayout,
    params: AnnealParams = None,
    rng: np.random.Generator = None,
) -> FusedSchedule:
    """
    Second annealing pass that lowers peak activation memory.

    Only neighbors whose makespan does not exceed that of `s_star` are
    admissible. The result has the makespan of `s_star` or less and a highest
    stage peak no higher than `s_star`'s.

    Raises:
        NeighborFrozenError: As anneal; `best` is the lowest-peak schedule
            reached, never worse than `s_star`
    """
    params = params or AnnealParams()
    rng = rng if rng is not None else np.random.default_rng(params.rng_seed)
    s_star = s_star if s_star.timeline is not None else evaluate(s_star, layout)
    limit = s_star.energy

    def admissible(schedule: FusedSchedule) -> bool:
        return schedule.energy <= limit

    sample = NeighborSampler(layout, params, rng, admissible, relieve_memory=True)
    current, current_energy = s_star, memory_energy(s_star, layout)
    best, best_key = current, (_peak(current, layout), current.energy)
    temperature = params.temperature_scale * current_energy
    stop = params.epsilon * temperature
    while temperature > stop:
        for _ in range(params.neighbors_per_temperature):
            try:
                neighbor = sample(current)
            except NeighborFrozenError as exc:
                exc.best = best
                raise
            neighbor_energy = memory_energy(neighbor, layout)
            key = (_peak(neighbor, layout), neighbor.energy)
            if key < best_key:
                best, best_key = neighbor, key
            p = acceptance_probability(current_energy, neighbor_energy, temperature)
            if p > rng.random():
                current, current_energy = neighbor, neighbor_energy
        temperature *= params.alpha
    logger.info("memory pass peak %.6g -> %.6g", _peak(s_star, layout), best_key[0])
    return best
