# src/genfuse/migration.py
# Long-tail migration planning: how many destination instances, which ones,
# where each remaining sample goes and whether its KV cache is shipped or
# recomputed.

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple, Mapping

from src.core.specs import CostModel, ModelSpec, ClusterSpec
from src.core.errors import ConfigError
from src.core.cost_model import ceil_div, prefill_latency
from src.genfuse.cluster import GenSample, GenInstance

logger = logging.getLogger(__name__)

KV_TRANSFER = 'kv_transfer'
RECOMPUTE = 'recompute_prefill'


@dataclass(frozen=True)
class GenClusterState:
    """Generation state at the trigger time."""

    time: float
    instances: Tuple[GenInstance, ...]
    pending: Mapping[int, Tuple[GenSample, ...]]
    kv_per_sample_max: float
    spec: ModelSpec
    cost: CostModel

    def remaining_count(self, instance_id: int) -> int:
        return len(self.pending.get(instance_id, ()))

    @property
    def total_remaining(self) -> int:
        return sum(len(v) for v in self.pending.values())


@dataclass(frozen=True)
class MigrationPlan:
    trigger_time: float
    R_t: int
    m: int
    destinations: Tuple[int, ...]
    mechanism: str
    migrated: Tuple[int, ...]
    overhead: float
    assignment: Tuple[Tuple[int, int], ...] = ()
    noop: bool = False

    def destination_of(self) -> Dict[int, int]:
        return dict(self.assignment)


def required_destinations(R_t: int, bs_max: int, kv_per_sample_max: float, kv_capacity: float) -> int:
    """Smallest m that keeps R_t samples within the decode plateau and the KV budget."""
    if R_t <= 0:
        return 0
    by_batch = ceil_div(R_t, bs_max)
    by_memory = ceil_div(R_t * kv_per_sample_max, kv_capacity)
    return max(1, by_batch, by_memory)


def select_destinations(counts: Mapping[int, int], m: int) -> Tuple[int, ...]:
    """Top-m instances by remaining samples, ties to the lower id."""
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    return tuple(sorted(ranked[:m]))


def _water_fill(
    samples: List[GenSample],
    destinations: Tuple[int, ...],
    load: Dict[int, int],
    reserved: Dict[int, float],
    kv_capacity: float,
) -> List[Tuple[int, int]]:
    assignment = []
    for sample in sorted(samples, key=lambda s: (-s.remaining, s.id)):
        fits = [d for d in destinations if reserved[d] + sample.final_kv_bytes <= kv_capacity]
        target = min(fits or destinations, key=lambda d: (load[d], d))
        load[target] += 1
        reserved[target] += sample.final_kv_bytes
        assignment.append((sample.id, target))
    return assignment


def plan_migration(state: GenClusterState, R_t: int, cluster: ClusterSpec) -> MigrationPlan:
    """
    Plan the migration triggered when the remaining-sample count falls below R_t.

    Args:
        state: Snapshot of every instance at the trigger time
        R_t: Migration threshold in samples
        cluster: Supplies bs_max, the per-instance KV budget and the bandwidth
    Returns:
        The plan; `state` is left untouched
    """
    if R_t < 0:
        raise ConfigError(f"R_t must be >= 0, got {R_t}", code="config.threshold")
    n = len(state.instances)
    ids = [inst.id for inst in state.instances]
    m = required_destinations(
        R_t, cluster.bs_max, state.kv_per_sample_max, cluster.kv_capacity_per_instance
    )
    if m == 0 or m >= n:
        logger.info("migration needs %d of %d instances; skipped", m, n)
        return MigrationPlan(
            trigger_time=state.time,
            R_t=R_t,
            m=n,
            destinations=tuple(ids),
            mechanism=KV_TRANSFER,
            migrated=(),
            overhead=0.0,
            noop=True,
        )

    counts = {i: state.remaining_count(i) for i in ids}
    destinations = select_destinations(counts, m)
    moving = [s for i in ids if i not in destinations for s in state.pending.get(i, ())]
    load = {d: counts[d] for d in destinations}
    reserved = {d: sum(s.final_kv_bytes for s in state.pending.get(d, ())) for d in destinations}
    assignment = _water_fill(
        moving, destinations, load, reserved, cluster.kv_capacity_per_instance
    )

    transfer_bytes = sum(s.kv_bytes for s in moving)
    bandwidth = cluster.interconnect_bandwidth
    transfer = 0.0 if math.isinf(bandwidth) else transfer_bytes / bandwidth
    by_sample = {s.id: s for s in moving}
    tokens = {d: 0 for d in destinations}
    for sample_id, d in assignment:
        tokens[d] += by_sample[sample_id].context_tokens
    gpus = state.instances[0].gpus
    recompute = max(
        (prefill_latency(state.spec, t, state.cost, gpus) for t in tokens.values()),
        default=0.0,
    )
    mechanism, overhead = (KV_TRANSFER, transfer) if transfer <= recompute else (RECOMPUTE, recompute)
    logger.info(
        "migration at %.3fs: %d samples onto %s via %s (%.3fs)",
        state.time,
        len(moving),
        list(destinations),
        mechanism,
        overhead,
    )
    return MigrationPlan(
        trigger_time=state.time,
        R_t=R_t,
        m=m,
        destinations=destinations,
        mechanism=mechanism,
        migrated=tuple(sorted(by_sample)),
        overhead=overhead,
        assignment=tuple(assignment),
    )
