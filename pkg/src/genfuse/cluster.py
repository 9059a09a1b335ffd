# src/genfuse/cluster.py
# Generation instances and their decode loop.

import enum
import math
import heapq
import logging
from collections import deque
from dataclasses import field, dataclass
from typing import Dict, List, Tuple, Deque, Iterable, FrozenSet

from src.core.specs import ModelSpec, CostModel
from src.core.errors import ConfigError, InfeasibleError
from src.core.cost_model import prefill_latency, decode_step_latency

logger = logging.getLogger(__name__)

TOKEN_EPS = 1e-9


class EventKind(enum.IntEnum):
    ADMIT = 1
    FINISH = 2
    MIGRATE_OUT = 3
    MIGRATE_IN = 4
    INFERENCE_DONE = 5

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True, order=True)
class TimelineEvent:
    time: float
    instance: int
    kind: EventKind
    sample: int

    def to_line(self) -> str:
        return f"{self.time:.9f},{self.instance},{self.kind.label},{self.sample}"


@dataclass
class GenSample:
    id: int
    prompt_len: int
    target_output_len: int
    kv_bytes_per_token: float
    generated: float = 0.0

    def __post_init__(self):
        if self.prompt_len < 0 or self.target_output_len < 1:
            raise ConfigError(
                f"sample {self.id}: prompt_len >= 0 and target_output_len >= 1 required",
                code="config.sample",
            )
        if not 0 <= self.generated <= self.target_output_len:
            raise ConfigError(f"sample {self.id}: generated out of range", code="config.sample")

    @property
    def remaining(self) -> float:
        return self.target_output_len - self.generated

    @property
    def kv_bytes(self) -> float:
        return (self.prompt_len + self.generated) * self.kv_bytes_per_token

    @property
    def final_kv_bytes(self) -> float:
        """Footprint once the sample is complete; reserved at admission."""
        return (self.prompt_len + self.target_output_len) * self.kv_bytes_per_token

    @property
    def context_tokens(self) -> int:
        return self.prompt_len + int(math.floor(self.generated + TOKEN_EPS))


@dataclass(frozen=True)
class GenInstance:
    id: int
    bs_max: int
    kv_capacity: float
    decode_step: float
    spec: ModelSpec
    gpus: int = 1
    inflight: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if self.bs_max < 1 or self.kv_capacity <= 0 or self.decode_step <= 0 or self.gpus < 1:
            raise ConfigError(
                f"instance {self.id}: bs_max, kv_capacity, decode_step and gpus must be positive",
                code="config.non_positive",
            )


@dataclass
class _Arrival:
    time: float
    seq: int
    sample: GenSample = field(compare=False)
    prefill: bool = field(compare=False)
    migrated: bool = field(compare=False)

    def __lt__(self, other):
        return (self.time, self.seq) < (other.time, other.seq)


class DecodeEngine:
    """
    Continuous-batching decode loop of one instance.

    Every running sample gains one token per decode step; the step latency is
    flat up to bs_max and grows linearly beyond. Admission is FIFO and reserves
    the sample's final KV footprint, so reserved bytes never exceed
    kv_capacity. Admitting samples that need a prefill stalls the instance for
    the prefill latency of their context tokens.
    """

    def __init__(self, instance: GenInstance, cost: CostModel, events: List[TimelineEvent]):
        self.instance = instance
        self.cost = cost
        self.events = events
        self.time = 0.0
        self.queue: Deque[Tuple[GenSample, bool]] = deque()
        self.running: List[GenSample] = []
        self.arrivals: List[_Arrival] = []
        self.reserved = 0.0
        self.peak_reserved = 0.0
        self.finish: Dict[int, float] = {}
        self._seq = 0

    @property
    def id(self) -> int:
        return self.instance.id

    def submit(
        self,
        samples: Iterable[GenSample],
        at: float = 0.0,
        prefill: bool = True,
        migrated: bool = False,
    ):
        for sample in samples:
            if sample.final_kv_bytes > self.instance.kv_capacity:
                raise InfeasibleError(
                    f"sample {sample.id} needs {sample.final_kv_bytes:.3g} KV bytes, "
                    f"instance {self.id} holds {self.instance.kv_capacity:.3g}",
                    code="genfuse.kv_too_small",
                )
            heapq.heappush(self.arrivals, _Arrival(at, self._seq, sample, prefill, migrated))
            self._seq += 1

    def pending(self) -> List[GenSample]:
        """Unfinished samples: running, queued and not yet arrived."""
        queued = [s for s, _ in self.queue]
        arriving = [a.sample for a in sorted(self.arrivals)]
        return self.running + queued + arriving

    def release(self, sample_ids: Iterable[int], at: float):
        """Hand samples over to another instance; their reservations are freed."""
        wanted = set(sample_ids)
        for sample in [s for s in self.running if s.id in wanted]:
            self.running.remove(sample)
            self.reserved -= sample.final_kv_bytes
            self.events.append(TimelineEvent(at, self.id, EventKind.MIGRATE_OUT, sample.id))
        kept = deque()
        for sample, prefill in self.queue:
            if sample.id in wanted:
                self.events.append(TimelineEvent(at, self.id, EventKind.MIGRATE_OUT, sample.id))
            else:
                kept.append((sample, prefill))
        self.queue = kept
        self.time = max(self.time, at)

    @property
    def done(self) -> bool:
        return not (self.running or self.queue or self.arrivals)

    def _take_arrivals(self, now: float):
        while self.arrivals and self.arrivals[0].time <= now:
            arrival = heapq.heappop(self.arrivals)
            if arrival.migrated:
                self.events.append(
                    TimelineEvent(arrival.time, self.id, EventKind.MIGRATE_IN, arrival.sample.id)
                )
            self.queue.append((arrival.sample, arrival.prefill))

    def _admit(self):
        tokens = 0
        while self.queue:
            sample, prefill = self.queue[0]
            if self.reserved + sample.final_kv_bytes > self.instance.kv_capacity:
                break
            self.queue.popleft()
            self.running.append(sample)
            self.reserved += sample.final_kv_bytes
            self.peak_reserved = max(self.peak_reserved, self.reserved)
            if prefill:
                tokens += sample.context_tokens
                self.events.append(TimelineEvent(self.time, self.id, EventKind.ADMIT, sample.id))
        if tokens:
            self.time += prefill_latency(self.instance.spec, tokens, self.cost, self.instance.gpus)

    def _complete(self, steps: float):
        finished = []
        for sample in self.running:
            if sample.remaining - steps <= TOKEN_EPS:
                sample.generated = float(sample.target_output_len)
                finished.append(sample)
            else:
                sample.generated += steps
        for sample in finished:
            self.running.remove(sample)
            self.reserved -= sample.final_kv_bytes
            self.finish[sample.id] = self.time
            self.events.append(TimelineEvent(self.time, self.id, EventKind.FINISH, sample.id))

    def run(self, until: float = math.inf):
        """Advance the instance to `until` (or until it drains)."""
        while self.time < until:
            self._take_arrivals(self.time)
            self._admit()
            if not self.running:
                if self.queue:
                    # the head alone exceeds the free KV: nothing can ever free it
                    raise InfeasibleError(
                        f"instance {self.id} cannot admit sample {self.queue[0][0].id}",
                        code="genfuse.kv_too_small",
                    )
                if not self.arrivals:
                    return
                self.time = min(max(self.time, self.arrivals[0].time), until)
                continue
            if self.time >= until:
                return
            step = decode_step_latency(
                len(self.running), self.instance.bs_max, self.instance.decode_step
            )
            steps = min(s.remaining for s in self.running)
            next_finish = self.time + steps * step
            next_arrival = self.arrivals[0].time if self.arrivals else math.inf
            horizon = min(next_arrival, until)
            if next_finish <= horizon:
                self.time = next_finish
                self._complete(steps)
            else:
                progress = (horizon - self.time) / step
                for sample in self.running:
                    sample.generated = min(sample.generated + progress, sample.target_output_len)
                self.time = horizon

    def snapshot(self) -> GenInstance:
        return GenInstance(
            id=self.instance.id,
            bs_max=self.instance.bs_max,
            kv_capacity=self.instance.kv_capacity,
            decode_step=self.instance.decode_step,
            spec=self.instance.spec,
            gpus=self.instance.gpus,
            inflight=frozenset(s.id for s in self.running),
        )
