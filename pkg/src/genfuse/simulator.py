# src/genfuse/simulator.py
# Serial and fused simulation of the generation and inference stages.

import math
import logging
from dataclasses import field, replace, dataclass
from typing import Dict, List, Tuple, Optional, Sequence

import numpy as np

from src.core.specs import CostModel, ModelSpec, ClusterSpec
from src.core.errors import ConfigError, InfeasibleError
from src.core.cost_model import kv_bytes, prefill_latency
from src.genfuse.cluster import (
    EventKind,
    GenSample,
    GenInstance,
    DecodeEngine,
    TimelineEvent,
)
from src.genfuse.migration import (
    RECOMPUTE,
    MigrationPlan,
    GenClusterState,
    plan_migration,
)

logger = logging.getLogger(__name__)

POOL = -1
TIME_TOL = 1e-9


@dataclass(frozen=True)
class InferenceTask:
    """Forward-only task (reference, reward or critic) run over every sample."""

    name: str
    spec: ModelSpec


@dataclass
class GenerationResult:
    total: float
    generation_end: float
    inference_end: float
    events: List[TimelineEvent] = field(default_factory=list)
    finish: Dict[int, float] = field(default_factory=dict)
    plan: Optional[MigrationPlan] = None
    serial_generation_end: Optional[float] = None
    preserved: bool = True

    @property
    def overhead(self) -> float:
        return self.plan.overhead if self.plan else 0.0

    def tail_share(self, done_fraction: float = 0.9) -> float:
        """Share of the generation stage spent after `done_fraction` of samples finished."""
        times = np.sort(np.fromiter(self.finish.values(), dtype=float))
        k = max(0, math.ceil(done_fraction * len(times)) - 1)
        return (self.generation_end - times[k]) / self.generation_end

    def timeline_text(self) -> str:
        return format_timeline(self.events)


def format_timeline(events: Sequence[TimelineEvent]) -> str:
    lines = ["time,instance,kind,sample"]
    lines.extend(event.to_line() for event in sorted(events))
    return "\n".join(lines) + "\n"


def make_batch(lengths: Sequence[int], prompt_len: int, spec: ModelSpec) -> List[GenSample]:
    per_token = kv_bytes(spec, 1)
    return [GenSample(i, prompt_len, int(n), per_token) for i, n in enumerate(lengths)]


def make_instances(
    num_instances: int,
    cluster: ClusterSpec,
    cost: CostModel,
    spec: ModelSpec,
    gpus: int,
) -> List[GenInstance]:
    if num_instances < 1:
        raise ConfigError("at least one generation instance is required", code="config.non_positive")
    if num_instances * gpus > cluster.num_gpus:
        raise InfeasibleError(
            f"{num_instances} instances of {gpus} GPUs exceed the {cluster.num_gpus}-GPU cluster",
            code="genfuse.cluster_too_small",
        )
    return [
        GenInstance(
            id=i,
            bs_max=cluster.bs_max,
            kv_capacity=cluster.kv_capacity_per_instance,
            decode_step=cost.decode_step_base,
            spec=spec,
            gpus=gpus,
        )
        for i in range(num_instances)
    ]


def inference_work(
    sample: GenSample, tasks: Sequence[InferenceTask], cost: CostModel, gpus: int
) -> float:
    """Instance-seconds of forward passes over the sample's full sequence."""
    tokens = sample.prompt_len + sample.target_output_len
    return sum(prefill_latency(task.spec, tokens, cost, gpus) for task in tasks)


def fluid_fifo(
    arrivals: Sequence[Tuple[float, float, int]],
    capacity_steps: Sequence[Tuple[float, int]],
) -> Dict[int, float]:
    """
    Completion times of work items served first-come first-served by a pool
    whose capacity (in instances) changes over time.

    Args:
        arrivals: (time, work in instance-seconds, sample id)
        capacity_steps: (time, capacity increment); capacity is 0 before the first
    Returns:
        Completion time per sample id
    """
    steps = sorted(capacity_steps)
    change_times = [t for t, _ in steps]
    capacity_after = list(np.cumsum([c for _, c in steps])) if steps else []

    def capacity(t: float) -> Tuple[float, float]:
        level, nxt = 0, math.inf
        for i, start in enumerate(change_times):
            if start <= t:
                level = capacity_after[i]
            else:
                nxt = start
                break
        return level, nxt

    done = {}
    t = 0.0
    for arrival, work, sample in sorted(arrivals):
        t = max(t, arrival)
        while work > 0:
            level, nxt = capacity(t)
            if level <= 0:
                if math.isinf(nxt):
                    raise InfeasibleError("inference pool has no capacity", code="genfuse.no_pool")
                t = nxt
                continue
            if t + work / level <= nxt:
                t += work / level
                work = 0.0
            else:
                work -= level * (nxt - t)
                t = nxt
        done[sample] = t
    return done


def _fresh(batch: Sequence[GenSample]) -> List[GenSample]:
    return [replace(s, generated=0.0) for s in batch]


def _start_engines(
    batch: List[GenSample], instances: Sequence[GenInstance], cost: CostModel
) -> Tuple[List[DecodeEngine], List[TimelineEvent]]:
    if not instances:
        raise ConfigError("at least one generation instance is required", code="config.non_positive")
    events: List[TimelineEvent] = []
    engines = [DecodeEngine(inst, cost, events) for inst in instances]
    for i, sample in enumerate(batch):
        engines[i % len(engines)].submit([sample])
    return engines, events


def _finish_inference(
    batch: List[GenSample],
    finish: Dict[int, float],
    tasks: Sequence[InferenceTask],
    cost: CostModel,
    gpus: int,
    capacity_steps: Sequence[Tuple[float, int]],
    events: List[TimelineEvent],
) -> float:
    arrivals = [(finish[s.id], inference_work(s, tasks, cost, gpus), s.id) for s in batch]
    done = fluid_fifo(arrivals, capacity_steps)
    for sample_id, t in done.items():
        events.append(TimelineEvent(t, POOL, EventKind.INFERENCE_DONE, sample_id))
    return max(done.values(), default=max(finish.values(), default=0.0))


def simulate_serial(
    batch: Sequence[GenSample],
    instances: Sequence[GenInstance],
    inference_tasks: Sequence[InferenceTask],
    cost: CostModel,
) -> GenerationResult:
    """
    Generation on every instance until the last sample finishes, then the
    inference tasks on the whole pool.
    """
    samples = _fresh(batch)
    engines, events = _start_engines(samples, instances, cost)
    finish: Dict[int, float] = {}
    for engine in engines:
        engine.run()
        finish.update(engine.finish)
    generation_end = max(finish.values(), default=0.0)
    inference_end = _finish_inference(
        samples,
        finish,
        inference_tasks,
        cost,
        instances[0].gpus,
        [(generation_end, len(instances))],
        events,
    )
    logger.debug("serial: generation %.3fs, inference %.3fs", generation_end, inference_end)
    return GenerationResult(
        total=inference_end,
        generation_end=generation_end,
        inference_end=inference_end,
        events=sorted(events),
        finish=finish,
        serial_generation_end=generation_end,
    )


def trigger_time(finish: Dict[int, float], R_t: int) -> float:
    """Time at which fewer than R_t samples remain."""
    times = sorted(finish.values())
    return times[max(0, len(times) - R_t)]


def simulate_fused(
    batch: Sequence[GenSample],
    instances: Sequence[GenInstance],
    inference_tasks: Sequence[InferenceTask],
    R_t: int,
    cluster: ClusterSpec,
    cost: CostModel,
    kv_per_sample_max: float = None,
) -> GenerationResult:
    """
    Generation with long-tail migration and overlapped inference.

    Generation runs exactly as in the serial mode until fewer than R_t samples
    remain. The remaining samples are then gathered on the planned destination
    instances; the other instances serve inference for completed samples, and
    the destinations join them once the tail is done.

    Args:
        batch: Samples, assigned round-robin to instances
        instances: Generation instances
        inference_tasks: Forward tasks run over every sample
        R_t: Migration threshold in samples; 0 disables migration
        cluster: Bandwidth, KV budget and bs_max
        cost: Cost coefficients
        kv_per_sample_max: Largest per-sample KV footprint, taken from the
            batch when omitted
    Returns:
        Fused timeline and stage boundaries
    """
    if R_t < 0:
        raise ConfigError(f"R_t must be >= 0, got {R_t}", code="config.threshold")
    serial = simulate_serial(batch, instances, inference_tasks, cost)
    if R_t == 0 or not batch:
        return serial

    samples = _fresh(batch)
    R_t = min(R_t, len(samples))
    trigger = trigger_time(serial.finish, R_t)
    engines, events = _start_engines(samples, instances, cost)
    for engine in engines:
        engine.run(until=trigger)

    if kv_per_sample_max is None:
        kv_per_sample_max = max(s.final_kv_bytes for s in samples)
    state = GenClusterState(
        time=trigger,
        instances=tuple(e.snapshot() for e in engines),
        pending={e.id: tuple(e.pending()) for e in engines},
        kv_per_sample_max=kv_per_sample_max,
        spec=instances[0].spec,
        cost=cost,
    )
    plan = plan_migration(state, R_t, cluster)
    by_id = {e.id: e for e in engines}
    sources = [e for e in engines if e.id not in plan.destinations]
    if not plan.noop:
        running = {sid for inst in state.instances for sid in inst.inflight}
        lookup = {s.id: s for s in samples}
        for engine in sources:
            engine.release([s.id for s in engine.pending()], trigger)
        recompute = plan.mechanism == RECOMPUTE
        arrive = trigger if recompute else trigger + plan.overhead
        for sample_id, dest in plan.assignment:
            needs_prefill = recompute or sample_id not in running
            by_id[dest].submit([lookup[sample_id]], at=arrive, prefill=needs_prefill, migrated=True)

    finish: Dict[int, float] = {}
    for engine in engines:
        engine.run()
        finish.update(engine.finish)
    generation_end = max(finish.values())

    if plan.noop:
        steps = [(generation_end, len(engines))]
    else:
        freed = trigger if plan.mechanism == RECOMPUTE else trigger + plan.overhead
        steps = [(freed, len(sources)), (generation_end, len(engines) - len(sources))]
    inference_end = _finish_inference(
        samples, finish, inference_tasks, cost, instances[0].gpus, steps, events
    )

    preserved = generation_end <= serial.generation_end + plan.overhead + TIME_TOL * max(
        1.0, serial.generation_end
    )
    if not preserved:
        logger.warning(
            "R_t=%d: generation ends at %.6fs, serial %.6fs + overhead %.6fs",
            R_t,
            generation_end,
            serial.generation_end,
            plan.overhead,
        )
    logger.debug(
        "fused R_t=%d: trigger %.3fs, generation %.3fs, total %.3fs",
        R_t,
        trigger,
        generation_end,
        inference_end,
    )
    return GenerationResult(
        total=max(inference_end, generation_end),
        generation_end=generation_end,
        inference_end=inference_end,
        events=sorted(events),
        finish=finish,
        plan=plan,
        serial_generation_end=serial.generation_end,
        preserved=preserved,
    )
