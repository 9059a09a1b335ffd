# src/pipeline/baseline.py
# Single-model pipeline schedules (1F1B and interleaved 1F1B) and the closed
# form bubble fractions they are compared against.

import logging
from fractions import Fraction
from dataclasses import field, dataclass
from typing import List, Tuple, Sequence

from src.core.errors import ConfigError
from src.pipeline.executor import replay

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TraceEntry:
    stage: int
    microbatch: int
    direction: str
    start: float
    end: float
    chunk: int = 0


@dataclass
class PipelineTaskTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    num_stages: int = 0

    @property
    def makespan(self):
        return max((e.end for e in self.entries), default=0)

    def stage_entries(self, stage: int) -> List[TraceEntry]:
        return sorted(
            (e for e in self.entries if e.stage == stage), key=lambda e: (e.start, e.end)
        )

    def busy_time(self, stage: int):
        return sum((e.end - e.start for e in self.entries if e.stage == stage), 0)

    def measured_bubble_fraction(self, stage: int = 0) -> Fraction:
        """Idle share of the makespan at `stage`, as an exact rational."""
        makespan = self.makespan
        if not makespan:
            return Fraction(0)
        return Fraction(makespan - self.busy_time(stage)) / Fraction(makespan)


def bubble_fraction(N: int, M: int, K: int = 1) -> Fraction:
    if min(N, M, K) < 1:
        raise ConfigError("N, M and K must be >= 1", code="config.non_positive")
    return Fraction(N - 1, N - 1 + K * M)


def one_f_one_b_order(N: int, M: int, stage: int) -> List[Tuple[str, int]]:
    """
    Per-stage 1F1B ordering as (direction, microbatch) pairs.

    Stage i warms up with min(N - i, M) forwards, then alternates one backward
    and one forward, then drains the remaining backwards.
    """
    warmup = min(N - stage, M)
    order = [('fwd', m) for m in range(warmup)]
    for k in range(M - warmup):
        order.append(('bwd', k))
        order.append(('fwd', warmup + k))
    order.extend(('bwd', k) for k in range(max(M - warmup, 0), M))
    return order


def _check_latencies(N: int, M: int, fwd: Sequence, bwd: Sequence):
    if N < 1 or M < 1:
        raise ConfigError(f"need N >= 1 and M >= 1, got N={N} M={M}")
    if not fwd or not bwd:
        raise ConfigError("latency arrays must not be empty", code="config.empty_latency")
    if len(fwd) != N or len(bwd) != N:
        raise ConfigError(
            f"latency arrays must have length {N}, got {len(fwd)} and {len(bwd)}",
            code="config.latency_shape",
        )


def schedule_1f1b(
    N: int, M: int, fwd: Sequence, bwd: Sequence, comm: float = 0.0
) -> PipelineTaskTrace:
    """
    Args:
        N: Pipeline stages
        M: Micro-batches
        fwd: Forward latency per stage
        bwd: Backward latency per stage
        comm: Communication time on each stage boundary
    Returns:
        Evaluated trace
    """
    _check_latencies(N, M, fwd, bwd)
    orders = [
        [(d, stage, m) for d, m in one_f_one_b_order(N, M, stage)] for stage in range(N)
    ]

    def duration(key):
        direction, stage, _ = key
        return fwd[stage] if direction == 'fwd' else bwd[stage]

    def depends_on(key):
        direction, stage, m = key
        if direction == 'fwd':
            return ('fwd', stage - 1, m) if stage > 0 else None
        if stage == N - 1:
            return ('fwd', stage, m)
        return ('bwd', stage + 1, m)

    times = replay(orders, duration, depends_on, comm)
    entries = [
        TraceEntry(stage, m, d, times[(d, stage, m)][0], times[(d, stage, m)][1])
        for stage, row in enumerate(orders)
        for d, _, m in row
    ]
    trace = PipelineTaskTrace(entries=entries, num_stages=N)
    logger.debug("1F1B N=%d M=%d makespan=%s", N, M, trace.makespan)
    return trace


def interleaved_order(N: int, M: int, K: int, stage: int) -> List[Tuple[str, int, int]]:
    """Megatron-style interleaved ordering as (direction, chunk, microbatch)."""
    total = M * K
    if M == N:
        warmup = total
    else:
        warmup = min((N - stage - 1) * 2 + (K - 1) * N, total)

    def chunk_of(k: int, forward: bool) -> int:
        chunk = (k % (N * K)) // N
        return chunk if forward else K - chunk - 1

    def microbatch_of(k: int) -> int:
        return (k // (N * K)) * N + k % N

    def fwd_op(k):
        return ('fwd', chunk_of(k, True), microbatch_of(k))

    def bwd_op(k):
        return ('bwd', chunk_of(k, False), microbatch_of(k))

    order = [fwd_op(k) for k in range(warmup)]
    remaining = total - warmup
    for k in range(remaining):
        order.append(fwd_op(k + warmup))
        order.append(bwd_op(k))
    order.extend(bwd_op(k) for k in range(remaining, total))
    return order


def schedule_interleaved(
    N: int,
    M: int,
    K: int,
    fwd: Sequence,
    bwd: Sequence,
    comm: float = 0.0,
) -> PipelineTaskTrace:
    """
    Interleaved 1F1B with K model chunks per stage.

    Each chunk runs 1/K of the stage's layers, so chunk latencies are the stage
    latencies divided by K. K > 1 requires M to be a multiple of N.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}", code="config.non_positive")
    if K == 1:
        return schedule_1f1b(N, M, fwd, bwd, comm)
    _check_latencies(N, M, fwd, bwd)
    if M % N:
        raise ConfigError(
            f"interleaved schedule needs M divisible by N, got M={M} N={N}",
            code="config.interleave_divisibility",
        )
    virtual = N * K
    orders = [
        [(d, c * N + stage, m) for d, c, m in interleaved_order(N, M, K, stage)]
        for stage in range(N)
    ]

    def duration(key):
        direction, v, _ = key
        base = fwd[v % N] if direction == 'fwd' else bwd[v % N]
        return base / K

    def depends_on(key):
        direction, v, m = key
        if direction == 'fwd':
            return ('fwd', v - 1, m) if v > 0 else None
        if v == virtual - 1:
            return ('fwd', v, m)
        return ('bwd', v + 1, m)

    times = replay(orders, duration, depends_on, comm)
    entries = [
        TraceEntry(v % N, m, d, times[(d, v, m)][0], times[(d, v, m)][1], chunk=v // N)
        for row in orders
        for d, v, m in row
    ]
    return PipelineTaskTrace(entries=entries, num_stages=N)


def makespan_1f1b(N: int, M: int, fwd: Sequence, bwd: Sequence, comm: float = 0.0):
    return schedule_1f1b(N, M, fwd, bwd, comm).makespan
